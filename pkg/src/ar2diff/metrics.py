"""Task metrics, split evaluation and inference-hyperparameter sweeps."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import torch

from .data import Vocab, strip_pads
from .decoding import AR_DEFAULT_TEMPERATURE, SamplerSettings, ar_generate, diffusion_decode_batch
from .model import Weights
from .tasks import PythonLikeTemplateTask, TaskSpec
from .training import step_seed

METRICS = ("exact_match", "token_f1", "pass_at_k")


@dataclass(frozen=True)
class MetricReport:
    task: str
    model: str
    metric: str
    value: float
    n_examples: int
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")
        if self.n_examples < 1:
            raise ValueError("n_examples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def exact_match(prediction: Sequence[int], reference: Sequence[int]) -> bool:
    return strip_pads(prediction) == strip_pads(reference)


def token_f1(prediction: str, reference: str) -> float:
    """Bag-of-words F1 over whitespace tokens."""
    pred, ref = prediction.split(), reference.split()
    if not pred and not ref:
        return 1.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 2 * p * r / (p + r)


def pass_at_k(candidates: Sequence[Sequence[str]], references: Sequence[str],
              passes: Callable[[str, str], bool]) -> float:
    """Fraction of examples where any candidate passes ``passes(candidate, reference)``."""
    if not references:
        raise ValueError("pass_at_k needs at least one example")
    hits = sum(any(passes(c, ref) for c in cands) for cands, ref in zip(candidates, references))
    return hits / len(references)


def checker_for(task: TaskSpec) -> Callable[[str, str], bool]:
    if isinstance(task, PythonLikeTemplateTask):
        return task.conforms
    return lambda cand, ref: cand == ref


@dataclass
class DecodedSplit:
    winners: list[list[int]]
    candidates: list[list[list[int]]]


def decode_split(
    weights: Weights,
    vocab: Vocab,
    sources: Sequence[str],
    settings: SamplerSettings,
    mode: str = "diffusion",
    ar_mode: str = "greedy",
    chunk_rows: int = 256,
) -> DecodedSplit:
    """Decode every source; prompts of equal length are batched together.

    Each length group draws from its own generator seeded by
    ``(settings.seed, prompt_len)``, so results do not depend on the order of
    the split.
    """
    prompts = [vocab.tokenize(s) for s in sources]
    groups: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        groups[len(p)].append(i)
    winners: list[list[int]] = [[] for _ in prompts]
    cands: list[list[list[int]]] = [[] for _ in prompts]
    n = settings.num_samples
    for plen in sorted(groups):
        idx = groups[plen]
        gen = torch.Generator().manual_seed(step_seed(settings.seed, plen))
        if mode == "diffusion":
            per_chunk = max(1, chunk_rows // n)
            for c in range(0, len(idx), per_chunk):
                sub = idx[c: c + per_chunk]
                batch = torch.tensor([prompts[i] for i in sub], dtype=torch.long)
                for i, res in zip(sub, diffusion_decode_batch(weights, batch, settings, vocab, gen)):
                    winners[i] = res.winner
                    cands[i] = res.candidates.tolist()
        elif mode == "ar":
            reps = 1 if ar_mode == "greedy" else n
            for c in range(0, len(idx), chunk_rows):
                sub = idx[c: c + chunk_rows]
                batch = torch.tensor([prompts[i] for i in sub for _ in range(reps)], dtype=torch.long)
                sep = torch.full((batch.shape[0], 1), vocab.sep_id, dtype=torch.long)
                out = ar_generate(weights, torch.cat([batch, sep], dim=1), settings.target_window,
                                  ar_mode, AR_DEFAULT_TEMPERATURE, gen)
                rows = out.tolist()
                for j, i in enumerate(sub):
                    cands[i] = rows[j * reps:(j + 1) * reps]
                    winners[i] = cands[i][0]
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
    return DecodedSplit(winners, cands)


def evaluate(
    weights: Weights,
    task: TaskSpec,
    split: Sequence[tuple[str, str]],
    vocab: Vocab,
    settings: SamplerSettings | None = None,
    metric: str = "exact_match",
    mode: str = "diffusion",
    model_id: str = "model",
    ar_mode: str = "greedy",
) -> MetricReport:
    """Decode ``split`` and score it with ``metric``."""
    if not split:
        raise ValueError("evaluation split is empty")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    settings = settings or SamplerSettings(target_window=task.target_window)
    decoded = decode_split(weights, vocab, [s for s, _ in split], settings, mode, ar_mode)
    return score_split(decoded, task, split, vocab, settings, metric, mode, model_id)


def score_split(decoded: DecodedSplit, task: TaskSpec, split, vocab: Vocab, settings: SamplerSettings,
                metric: str, mode: str = "diffusion", model_id: str = "model") -> MetricReport:
    refs = [t for _, t in split]
    n = len(refs)
    if metric == "exact_match":
        hits = sum(exact_match(w, vocab.tokenize(r)) for w, r in zip(decoded.winners, refs))
        value = float(Fraction(hits, n))
    elif metric == "token_f1":
        value = sum(token_f1(vocab.detokenize(strip_pads(w)), r)
                    for w, r in zip(decoded.winners, refs)) / n
    else:
        texts = [[vocab.detokenize(strip_pads(c)) for c in cs] for cs in decoded.candidates]
        value = pass_at_k(texts, refs, checker_for(task))
    echo = {"mode": mode, "steps": settings.num_steps, "samples": settings.num_samples,
            "tau": settings.tau, "seed": settings.seed, "target_window": settings.target_window}
    return MetricReport(task.kind, model_id, metric, value, n, echo)


def sweep(
    weights: Weights,
    task: TaskSpec,
    split: Sequence[tuple[str, str]],
    vocab: Vocab,
    steps_grid: Sequence[int] = (5, 10, 20),
    samples_grid: Sequence[int] = (4, 8, 16),
    base: SamplerSettings | None = None,
    metric: str = "exact_match",
    model_id: str = "model",
) -> list[list[MetricReport]]:
    """``reports[i][j]`` evaluates ``steps_grid[i]`` denoising steps with ``samples_grid[j]`` candidates."""
    if not steps_grid or not samples_grid:
        raise ValueError("sweep grids must be nonempty")
    base = base or SamplerSettings(target_window=task.target_window)
    return [
        [evaluate(weights, task, split, vocab, replace(base, num_steps=t, num_samples=n), metric,
                  "diffusion", model_id) for n in samples_grid]
        for t in steps_grid
    ]
