"""Wall-clock comparison of token-by-token AR decoding and fixed-step diffusion decoding."""

from __future__ import annotations

import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Vocab
from .decoding import SamplerSettings, ar_generate, diffusion_decode_batch
from .model import Weights

MIN_TOTAL_MS = 1.0


@dataclass(frozen=True)
class LatencyRecord:
    kind: str          # "ar" or "diffusion"
    length: int        # tokens decoded
    reps: int
    median_ms: float   # median total wall time of one decode
    per_unit_ms: float  # per generated token (ar) or per denoising step (diffusion)
    steps: int         # tokens (ar) or denoising steps (diffusion) executed

    def __post_init__(self):
        if self.median_ms <= 0 or self.per_unit_ms <= 0:
            raise ValueError("latency values must be strictly positive")
        if self.reps < 3:
            raise ValueError("latency records need at least 3 repetitions")

    def to_dict(self) -> dict:
        return asdict(self)


@contextmanager
def single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def time_call(fn: Callable[[], object], reps: int = 3, warmup: int = 2) -> tuple[float, int, int]:
    """Median wall time (ms) of ``fn`` over ``reps`` timed runs.

    When one call takes under 1 ms the call is repeated ``inner`` times per
    timed run and the per-call mean is used.  Returns ``(median_ms, reps, inner)``.
    """
    for _ in range(warmup):
        fn()
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        if (time.perf_counter() - t0) * 1e3 >= MIN_TOTAL_MS:
            break
        inner *= 2
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) * 1e3 / inner)
    return statistics.median(samples), reps, inner


def latency_benchmark(
    weights: Weights,
    vocab: Vocab,
    lengths: Sequence[int] = (64, 128, 256, 512),
    num_steps: int = 10,
    reps: int = 3,
    warmup: int = 2,
    seed: int = 0,
) -> list[LatencyRecord]:
    """Time AR greedy decoding of exactly L tokens and ``num_steps``-step diffusion over an L-token window.

    Both use batch size 1 and one candidate, a one-token prompt, and the same
    weights.  Runs single-threaded.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    prompt = torch.tensor([[vocab.first_regular_id]], dtype=torch.long)
    for n in lengths:
        if prompt.shape[1] + 1 + n > weights.config.max_seq_len:
            raise ValueError(f"length {n} does not fit max_seq_len {weights.config.max_seq_len}")
    records = []
    with single_thread(), torch.no_grad():
        for n in lengths:
            gen = torch.Generator().manual_seed(seed)

            def run_ar():
                ar_generate(weights, prompt, n, "greedy", stop_at_pad=False)

            settings = SamplerSettings(num_steps=num_steps, num_samples=1, target_window=n, seed=seed)

            def run_diffusion():
                gen.manual_seed(seed)
                diffusion_decode_batch(weights, prompt, settings, vocab, gen)

            ms, r, _ = time_call(run_ar, reps, warmup)
            records.append(LatencyRecord("ar", n, r, ms, ms / n, n))
            ms, r, _ = time_call(run_diffusion, reps, warmup)
            records.append(LatencyRecord("diffusion", n, r, ms, ms / num_steps, num_steps))
    return records


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of a least-squares line through ``(x, y)``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
