"""Autoregressive and diffusion decoding."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch

from .data import PAD_ID, SEP_ID, Vocab
from .losses import sample_tokens
from .model import (
    AttentionMode,
    ConfigError,
    KVCache,
    Weights,
    build_attention_mask,
    forward,
    forward_cached,
)

AR_DEFAULT_TEMPERATURE = 0.8


@dataclass(frozen=True)
class SamplerSettings:
    num_steps: int = 10
    num_samples: int = 8
    tau: float = 0.2
    target_window: int = 16
    seed: int = 0

    def validate(self, max_seq_len: int | None = None, prompt_len: int | None = None) -> "SamplerSettings":
        if self.num_steps < 1:
            raise ConfigError("sampler.num_steps must be >= 1")
        if self.num_samples < 1:
            raise ConfigError("sampler.num_samples must be >= 1")
        if self.tau < 0:
            raise ConfigError("sampler.tau must be >= 0")
        if self.target_window < 1:
            raise ConfigError("sampler.target_window must be >= 1")
        if max_seq_len is not None and prompt_len is not None:
            if prompt_len + 1 + self.target_window > max_seq_len:
                raise ValueError(
                    f"prompt of {prompt_len} tokens + sep + window {self.target_window} "
                    f"exceeds max_seq_len {max_seq_len}"
                )
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecodeResult:
    candidates: torch.Tensor  # [N, target_window]
    scores: torch.Tensor      # [N], log-likelihood, higher is better
    winner_index: int
    steps_executed: int

    @property
    def winner(self) -> list[int]:
        return self.candidates[self.winner_index].tolist()


# -- autoregressive -------------------------------------------------------------


def _pick(logits: torch.Tensor, mode: str, temperature: float, gen) -> torch.Tensor:
    if mode == "greedy":
        return logits.argmax(dim=-1)
    if mode == "temperature":
        return sample_tokens(logits, temperature, gen)
    raise ValueError(f"unknown AR decoding mode {mode!r}")


@torch.no_grad()
def ar_generate(
    weights: Weights,
    prompts: torch.Tensor,
    max_new: int,
    mode: str = "greedy",
    temperature: float = AR_DEFAULT_TEMPERATURE,
    gen: torch.Generator | None = None,
    use_cache: bool = True,
    stop_at_pad: bool = True,
    return_logits: bool = False,
):
    """Left-to-right generation for a ``[B, P]`` batch of equal-length prompts.

    Returns ``[B, n]`` generated ids with ``n <= max_new``; rows that emitted a
    pad keep emitting pads.  Generation ends early once every row has emitted
    a pad (when ``stop_at_pad``).
    """
    b, p = prompts.shape
    if p < 1:
        raise ValueError("prompt must be nonempty")
    if p + max_new > weights.config.max_seq_len:
        raise ValueError(
            f"prompt length {p} + max_new {max_new} exceeds max_seq_len {weights.config.max_seq_len}"
        )
    out = torch.empty(b, 0, dtype=torch.long)
    step_logits = []
    if max_new == 0:
        return (out, torch.empty(b, 0, weights.config.vocab_size)) if return_logits else out
    done = torch.zeros(b, dtype=torch.bool)
    if use_cache:
        cache = KVCache(weights.config.n_layers)
        last = forward_cached(weights, prompts, cache)[:, -1]
    else:
        seq = prompts
        last = forward(weights, seq, build_attention_mask(AttentionMode.causal(), p))[:, -1]
    for i in range(max_new):
        step_logits.append(last)
        nxt = _pick(last, mode, temperature, gen)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        out = torch.cat([out, nxt[:, None]], dim=1)
        done |= nxt == PAD_ID
        if (stop_at_pad and bool(done.all())) or i == max_new - 1:
            break
        if use_cache:
            last = forward_cached(weights, nxt[:, None], cache)[:, -1]
        else:
            seq = torch.cat([prompts, out], dim=1)
            last = forward(weights, seq, build_attention_mask(AttentionMode.causal(), seq.shape[1]))[:, -1]
    if return_logits:
        return out, torch.stack(step_logits, dim=1)
    return out


def ar_decode(
    weights: Weights,
    prompt: Sequence[int],
    mode: str = "greedy",
    max_new: int = 16,
    temperature: float = AR_DEFAULT_TEMPERATURE,
    gen: torch.Generator | None = None,
    use_cache: bool = True,
    stop_at_pad: bool = True,
) -> list[int]:
    """Prompt followed by the generated tokens (up to and including a terminating pad)."""
    prompts = torch.tensor([list(prompt)], dtype=torch.long)
    new = ar_generate(weights, prompts, max_new, mode, temperature, gen, use_cache, stop_at_pad)
    tokens = new[0].tolist()
    if stop_at_pad and PAD_ID in tokens:
        tokens = tokens[: tokens.index(PAD_ID) + 1]
    return list(prompt) + tokens


# -- diffusion ------------------------------------------------------------------


def diffusion_init(
    prompt: Sequence[int], settings: SamplerSettings, vocab: Vocab, gen: torch.Generator | None = None
) -> torch.Tensor:
    """``[N, P + 1 + W]``: prompt, sep, then uniform random non-special tokens per candidate."""
    n, w = settings.num_samples, settings.target_window
    head = torch.tensor(list(prompt) + [SEP_ID], dtype=torch.long).expand(n, -1)
    lo, hi = vocab.regular_ids.start, vocab.regular_ids.stop
    tail = torch.randint(lo, hi, (n, w), generator=gen)
    return torch.cat([head, tail], dim=1)


@torch.no_grad()
def diffusion_step(
    weights: Weights,
    candidates: torch.Tensor,
    prefix_len: int,
    tau: float,
    gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Resample every position from ``prefix_len`` on; returns ``(updated, logits)``."""
    logits = forward(weights, candidates, None)
    sampled = sample_tokens(logits[:, prefix_len:], tau, gen)
    updated = candidates.clone()
    updated[:, prefix_len:] = sampled
    return updated, logits


def model_score(logits: torch.Tensor, inputs: torch.Tensor, prefix_len: int = 0) -> torch.Tensor:
    """Log-likelihood of ``inputs`` under ``logits`` summed over positions >= ``prefix_len``.

    Works on ``[S, V]``/``[S]`` or batched ``[N, S, V]``/``[N, S]``.
    """
    if logits.shape[:-1] != inputs.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and inputs {tuple(inputs.shape)} disagree")
    logp = torch.log_softmax(logits[..., prefix_len:, :].double(), dim=-1)
    picked = logp.gather(-1, inputs[..., prefix_len:, None]).squeeze(-1)
    return picked.sum(dim=-1)


@torch.no_grad()
def diffusion_decode_batch(
    weights: Weights,
    prompts: torch.Tensor,
    settings: SamplerSettings,
    vocab: Vocab,
    gen: torch.Generator | None = None,
) -> list[DecodeResult]:
    """Decode ``[B, P]`` equal-length prompts, ``num_samples`` candidates each."""
    settings.validate(weights.config.max_seq_len, prompts.shape[1])
    gen = gen if gen is not None else torch.Generator().manual_seed(settings.seed)
    n = settings.num_samples
    x = torch.cat([diffusion_init(p.tolist(), settings, vocab, gen) for p in prompts])
    prefix = prompts.shape[1] + 1
    for _ in range(settings.num_steps):
        x_in = x
        x, logits = diffusion_step(weights, x_in, prefix, settings.tau, gen)
    scores = model_score(logits, x_in, prefix)
    results = []
    for i in range(prompts.shape[0]):
        sl = slice(i * n, (i + 1) * n)
        sc = scores[sl]
        results.append(DecodeResult(x[sl, prefix:].clone(), sc, int(sc.argmax()), settings.num_steps))
    return results


def diffusion_decode(
    weights: Weights, prompt: Sequence[int], settings: SamplerSettings, vocab: Vocab
) -> DecodeResult:
    """Run ``num_steps`` denoising steps over ``num_samples`` candidates and rerank.

    Each candidate is scored by the log-likelihood of the final step's input
    under that step's output logits; the winner is the highest score (lowest
    index on ties).
    """
    if len(prompt) < 1:
        raise ValueError("prompt must be nonempty")
    prompts = torch.tensor([list(prompt)], dtype=torch.long)
    return diffusion_decode_batch(weights, prompts, settings, vocab)[0]
