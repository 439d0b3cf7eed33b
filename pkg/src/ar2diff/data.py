"""Character vocabulary, training-example construction and batching."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .model import AttentionMode

PAD_ID = 0
BOS_ID = 1
SEP_ID = 2
FIRST_SENTINEL_ID = 3
N_SENTINELS = 16

SPECIAL_TOKENS = ["<pad>", "<bos>", "<sep>"] + [f"<s{i}>" for i in range(N_SENTINELS)]
ALPHABET = string.printable[:95].replace("\t", "") + "\n"  # space..~ plus newline


class Vocab:
    """Bijective token <-> id map.

    Ids ``0..2`` are pad/bos/sep, then a contiguous block of sentinels, then
    one id per alphabet character.
    """

    def __init__(self, tokens: Sequence[str] | None = None):
        tokens = list(tokens) if tokens is not None else SPECIAL_TOKENS + list(ALPHABET)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved special tokens")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def sep_id(self) -> int:
        return SEP_ID

    @property
    def sentinel_ids(self) -> range:
        return range(FIRST_SENTINEL_ID, FIRST_SENTINEL_ID + N_SENTINELS)

    @property
    def first_regular_id(self) -> int:
        return len(SPECIAL_TOKENS)

    @property
    def regular_ids(self) -> range:
        """Ids of non-special tokens (used for corruption and diffusion init)."""
        return range(self.first_regular_id, len(self.tokens))

    def tokenize(self, text: str) -> list[int]:
        out = []
        for pos, ch in enumerate(text):
            i = self.ids.get(ch)
            if i is None or i < self.first_regular_id:
                raise ValueError(f"character {ch!r} at position {pos} is not in the alphabet")
            out.append(i)
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        """Inverse of :meth:`tokenize`; pad ids are dropped, other specials kept by name."""
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"invalid token id {i}")
            if i != PAD_ID:
                out.append(self.tokens[i])
        return "".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.ids, indent=1, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        mapping = json.loads(Path(path).read_text())
        tokens = [None] * len(mapping)
        for tok, i in mapping.items():
            if not 0 <= i < len(tokens) or tokens[i] is not None:
                raise ValueError(f"vocabulary file has a non-contiguous or duplicate id {i}")
            tokens[i] = tok
        return cls(tokens)


@dataclass(frozen=True)
class TrainingExample:
    tokens: tuple[int, ...]
    prefix_len: int
    loss_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.loss_mask):
            raise ValueError("tokens and loss_mask lengths differ")
        if any(self.loss_mask[: self.prefix_len]):
            raise ValueError("loss_mask must be false on the input region")
        if not any(self.loss_mask):
            raise ValueError("loss_mask must cover at least one position")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def target(self) -> tuple[int, ...]:
        return self.tokens[self.prefix_len:]


def make_prefix_lm_example(
    doc: Sequence[int], split: int, total_len: int, target_len: int
) -> TrainingExample:
    """``doc[:split] + SEP`` as input, ``doc[split:]`` padded/truncated to ``target_len`` as target."""
    doc = list(doc)
    if not 1 <= split < len(doc):
        raise ValueError(f"split {split} out of range [1, {len(doc)})")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if split + 1 + target_len > total_len:
        raise ValueError(
            f"input of {split + 1} tokens plus target window {target_len} exceeds capacity {total_len}"
        )
    target = doc[split: split + target_len]
    target += [PAD_ID] * (target_len - len(target))
    tokens = doc[:split] + [SEP_ID] + target
    prefix_len = split + 1
    return TrainingExample(tuple(tokens), prefix_len, (False,) * prefix_len + (True,) * target_len)


def make_pair_example(
    source: Sequence[int], target: Sequence[int], target_len: int, total_len: int
) -> TrainingExample:
    """Prefix-LM example for a (source, target) task pair."""
    if len(target) > target_len:
        raise ValueError(f"target of {len(target)} tokens exceeds window {target_len}")
    if len(source) + 1 + target_len > total_len:
        raise ValueError(f"source of {len(source)} tokens does not fit capacity {total_len}")
    padded = list(target) + [PAD_ID] * (target_len - len(target))
    tokens = list(source) + [SEP_ID] + padded
    prefix_len = len(source) + 1
    return TrainingExample(tuple(tokens), prefix_len, (False,) * prefix_len + (True,) * target_len)


def _random_segmentation(num_items: int, num_segments: int, rng: np.random.Generator) -> list[int]:
    cuts = np.sort(rng.choice(np.arange(1, num_items), size=num_segments - 1, replace=False))
    bounds = np.concatenate([[0], cuts, [num_items]])
    return np.diff(bounds).tolist()


def span_noise_mask(
    length: int, noise_density: float, mean_span_len: float, rng: np.random.Generator
) -> list[bool]:
    """Noise mask made of random spans, alternating non-noise / noise.

    When the density rounds to zero noise tokens a single length-1 span is
    placed at a random position instead.
    """
    num_noise = min(int(round(length * noise_density)), length - 1)
    if num_noise <= 0:
        mask = [False] * length
        mask[int(rng.integers(length))] = True
        return mask
    num_nonnoise = length - num_noise
    num_spans = max(1, int(round(num_noise / mean_span_len)))
    num_spans = min(num_spans, num_noise, num_nonnoise)
    noise_lens = _random_segmentation(num_noise, num_spans, rng)
    keep_lens = _random_segmentation(num_nonnoise, num_spans, rng)
    mask: list[bool] = []
    for keep, noise in zip(keep_lens, noise_lens):
        mask += [False] * keep + [True] * noise
    return mask


def make_span_corruption_example(
    doc: Sequence[int],
    noise_density: float = 0.15,
    mean_span_len: float = 3.0,
    rng: np.random.Generator | None = None,
    target_len: int | None = None,
) -> TrainingExample:
    """Replace random spans of ``doc`` with sentinels; the target lists ``sentinel + span`` pairs."""
    doc = list(doc)
    if not doc:
        raise ValueError("doc must be nonempty")
    if not 0 < noise_density < 1:
        raise ValueError("noise_density must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng()
    mask = span_noise_mask(len(doc), noise_density, mean_span_len, rng)
    inputs: list[int] = []
    target: list[int] = []
    sentinel = FIRST_SENTINEL_ID
    prev = False
    for tok, noisy in zip(doc, mask):
        if noisy and not prev:
            if sentinel >= FIRST_SENTINEL_ID + N_SENTINELS - 1:
                raise ValueError(f"more than {N_SENTINELS - 1} spans exceed the sentinel budget")
            inputs.append(sentinel)
            target.append(sentinel)
            sentinel += 1
        if noisy:
            target.append(tok)
        else:
            inputs.append(tok)
        prev = noisy
    target.append(sentinel)
    if target_len is not None:
        if len(target) > target_len:
            raise ValueError(f"span target of {len(target)} tokens exceeds window {target_len}")
        target += [PAD_ID] * (target_len - len(target))
    tokens = inputs + [SEP_ID] + target
    prefix_len = len(inputs) + 1
    return TrainingExample(tuple(tokens), prefix_len, (False,) * prefix_len + (True,) * len(target))


def uncorrupt_spans(example: TrainingExample) -> list[int]:
    """Rebuild the original document from a span-corruption example."""
    inputs = list(example.tokens[: example.prefix_len - 1])
    spans: dict[int, list[int]] = {}
    current = None
    for tok in example.target:
        if tok in range(FIRST_SENTINEL_ID, FIRST_SENTINEL_ID + N_SENTINELS):
            current = tok
            spans[current] = []
        elif tok != PAD_ID and current is not None:
            spans[current].append(tok)
    out = []
    for tok in inputs:
        out += spans[tok] if tok in spans else [tok]
    return out


@dataclass
class Batch:
    tokens: torch.Tensor      # [B, S] int64
    prefix_len: torch.Tensor  # [B] int64
    loss_mask: torch.Tensor   # [B, S] bool
    lengths: torch.Tensor     # [B] int64, unpadded example lengths

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def input_mask(self) -> torch.Tensor:
        """True on positions before each example's ``prefix_len``."""
        pos = torch.arange(self.seq_len)
        return pos[None, :] < self.prefix_len[:, None]

    def attention_mask(self, kind: str) -> torch.Tensor:
        """``[B, S, S]`` mask for attention ``kind`` that also hides batch padding."""
        s = self.seq_len
        pos = torch.arange(s)
        if kind == AttentionMode.CAUSAL:
            base = (pos[None, :] <= pos[:, None]).expand(len(self), s, s)
        elif kind == AttentionMode.FULL:
            base = torch.ones(len(self), s, s, dtype=torch.bool)
        elif kind == AttentionMode.PREFIX:
            base = (pos[None, None, :] < self.prefix_len[:, None, None]) | (pos[None, :] <= pos[:, None])
        else:
            raise ValueError(f"unknown attention kind {kind!r}")
        valid = pos[None, None, :] < self.lengths[:, None, None]
        return (base & valid) | torch.eye(s, dtype=torch.bool)

    def select(self, index) -> "Batch":
        return Batch(self.tokens[index], self.prefix_len[index], self.loss_mask[index], self.lengths[index])


def collate(examples: Sequence[TrainingExample], pad_to: int) -> Batch:
    """Right-pad examples to ``pad_to`` with the pad id; padding is never loss-masked."""
    if not examples:
        raise ValueError("cannot batch zero examples")
    tokens = torch.full((len(examples), pad_to), PAD_ID, dtype=torch.long)
    loss_mask = torch.zeros((len(examples), pad_to), dtype=torch.bool)
    for i, ex in enumerate(examples):
        if len(ex) > pad_to:
            raise ValueError(f"example {i} has {len(ex)} tokens, more than pad_to={pad_to}")
        tokens[i, : len(ex)] = torch.tensor(ex.tokens, dtype=torch.long)
        loss_mask[i, : len(ex)] = torch.tensor(ex.loss_mask, dtype=torch.bool)
    prefix_len = torch.tensor([ex.prefix_len for ex in examples], dtype=torch.long)
    lengths = torch.tensor([len(ex) for ex in examples], dtype=torch.long)
    return Batch(tokens, prefix_len, loss_mask, lengths)


def batches(
    examples: Sequence[TrainingExample], batch_size: int, pad_to: int
) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not examples:
        raise ValueError("cannot batch zero examples")
    for i in range(0, len(examples), batch_size):
        yield collate(examples[i: i + batch_size], pad_to)


def strip_pads(ids: Sequence[int]) -> list[int]:
    """Drop trailing pad ids."""
    ids = [int(i) for i in ids]
    while ids and ids[-1] == PAD_ID:
        ids.pop()
    return ids
