"""Stage training loop, checkpoint/resume and the AR -> diffusion pipeline."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .data import Batch, Vocab, collate, make_pair_example, make_prefix_lm_example, make_span_corruption_example
from .losses import DiffusionSettings, ar_objective, corrupt, sundae_objective
from .model import AttentionMode, ConfigError, Weights, value_and_grad
from .optim import Adam, OptimizerState
from .tasks import corpus_document

log = logging.getLogger(__name__)

AR = "ar"
DIFFUSION = "diffusion"


class TrainingError(RuntimeError):
    pass


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0] >> 1)


# -- data streams ----------------------------------------------------------------


class DataStream(Protocol):
    def batch_at(self, step: int) -> Batch: ...

    def identifier(self) -> str: ...


@dataclass
class CorpusStream:
    """Pretraining batches from the synthetic prose/code mixture."""

    vocab: Vocab
    seed: int = 0
    batch_size: int = 32
    seq_len: int = 64
    target_len: int = 24
    objective: str = "prefix_lm"
    code_fraction: float = 0.2
    noise_density: float = 0.15
    mean_span_len: float = 3.0

    def __post_init__(self):
        if self.objective not in ("prefix_lm", "span_corruption"):
            raise ConfigError(f"unknown pretraining objective {self.objective!r}")
        if self.target_len + 2 > self.seq_len:
            raise ConfigError("corpus target_len leaves no room for an input region")

    def example(self, index: int):
        ids = self.vocab.tokenize(corpus_document(self.seed, index, self.code_fraction))
        rng = np.random.default_rng([self.seed, index, 7])
        if self.objective == "span_corruption":
            return make_span_corruption_example(
                ids[: self.seq_len // 2], self.noise_density, self.mean_span_len, rng
            )
        max_split = min(len(ids) - 1, self.seq_len - 1 - self.target_len)
        split = int(rng.integers(1, max_split + 1))
        return make_prefix_lm_example(ids, split, self.seq_len, self.target_len)

    def batch_at(self, step: int) -> Batch:
        exs = [self.example(step * self.batch_size + b) for b in range(self.batch_size)]
        return collate(exs, max(len(e) for e in exs))

    def identifier(self) -> str:
        return (f"corpus:{self.objective}:seed={self.seed}:seq={self.seq_len}:"
                f"target={self.target_len}:code={self.code_fraction}")


class TaskStream:
    """Batches drawn from a fixed list of (source, target) pairs."""

    def __init__(self, vocab: Vocab, pairs: Sequence[tuple[str, str]], target_window: int,
                 batch_size: int = 32, seq_len: int = 64, seed: int = 0, name: str = "task"):
        if not pairs:
            raise ValueError("task stream needs at least one pair")
        self.examples = [
            make_pair_example(vocab.tokenize(s), vocab.tokenize(t), target_window, seq_len)
            for s, t in pairs
        ]
        self.batch_size = batch_size
        self.seed = seed
        self.name = name
        self._digest = file_digest_of_pairs(pairs)

    def batch_at(self, step: int) -> Batch:
        rng = np.random.default_rng([self.seed, step, 11])
        n = len(self.examples)
        idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
        exs = [self.examples[i] for i in idx]
        return collate(exs, max(len(e) for e in exs))

    def identifier(self) -> str:
        return f"{self.name}:n={len(self.examples)}:seed={self.seed}:sha={self._digest[:16]}"


@dataclass
class OffsetStream:
    """``inner`` shifted by ``offset`` steps, so a later stage sees unseen batches."""

    inner: DataStream
    offset: int

    def batch_at(self, step: int) -> Batch:
        return self.inner.batch_at(step + self.offset)

    def identifier(self) -> str:
        return f"{self.inner.identifier()}:offset={self.offset}"


def file_digest_of_pairs(pairs: Sequence[tuple[str, str]]) -> str:
    import hashlib

    h = hashlib.sha256()
    for s, t in pairs:
        h.update(json.dumps([s, t]).encode())
    return h.hexdigest()


# -- stages -----------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str
    steps: int
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 32
    checkpoint_every: int = 0
    seed: int = 0
    attention: str | None = None

    def __post_init__(self):
        if self.kind not in (AR, DIFFUSION):
            raise ConfigError(f"stage {self.name}: kind must be 'ar' or 'diffusion'")
        if self.steps < 0:
            raise ConfigError(f"stage {self.name}: steps must be >= 0")
        if self.attention is None:
            object.__setattr__(self, "attention", AttentionMode.CAUSAL if self.kind == AR else AttentionMode.FULL)
        if self.kind == DIFFUSION and self.attention != AttentionMode.FULL:
            raise ConfigError(f"stage {self.name}: diffusion stages require full bidirectional attention")
        if self.kind == AR and self.attention == AttentionMode.FULL:
            raise ConfigError(f"stage {self.name}: AR stages cannot use full bidirectional attention")

    def optimizer(self) -> Adam:
        return Adam(lr=self.lr, warmup_steps=self.warmup_steps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    weights: Weights
    opt_state: OptimizerState
    checkpoints: list[Path] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    stopped_early: bool = False


def checkpoint_path(out_dir: Path, stage: Stage, step: int) -> Path:
    return Path(out_dir) / f"{stage.name}_{step}.ckpt"


def write_checkpoint(path: Path, weights: Weights, opt_state: OptimizerState, stage: Stage,
                     step: int, parent: str | None, data_id: str) -> Path:
    meta = {
        "stage": stage.name,
        "kind": stage.kind,
        "attention": stage.attention,
        "step": step,
        "opt_step": opt_state.step,
        "seed": stage.seed,
        "parent": parent,
        "data": data_id,
    }
    save_checkpoint(path, weights, meta, opt_state.to_tensors())
    sidecar = dict(meta, sha256=file_hash(path), checkpoint=path.name)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def train_step(weights, opt_state, optimizer, stage, batch, vocab, settings, gen):
    """One optimizer update; returns ``(loss, diagnostics, lr)``."""
    if stage.kind == AR:
        loss, grads, aux = value_and_grad(weights, lambda w: ar_objective(w, batch, stage.attention))
    else:
        corrupted = corrupt(batch.tokens, batch.loss_mask, vocab, gen)
        loss, grads, aux = value_and_grad(
            weights, lambda w: sundae_objective(w, batch, corrupted, settings, gen)
        )
    if not math.isfinite(float(loss)):
        return float(loss), aux, None
    lr = optimizer.update(weights, grads, opt_state)
    return float(loss), aux, lr


def train(
    stage: Stage,
    start: Weights,
    stream: DataStream,
    vocab: Vocab,
    out_dir: str | Path,
    settings: DiffusionSettings = DiffusionSettings(),
    resume_from: str | Path | None = None,
    log_path: str | Path | None = None,
    parent: str | None = None,
    extra_checkpoints: Sequence[int] = (),
    eval_fn: Callable[[Weights], float] | None = None,
    eval_every: int = 0,
    patience: int = 10,
) -> TrainResult:
    """Run ``stage.steps`` updates from ``start`` (or from a mid-stage checkpoint).

    Every step draws its batch and corruption noise from seeds derived from
    ``(stage.seed, step)``, so a resumed run replays the uninterrupted one
    bit for bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings.validate()
    Stage.__post_init__(stage)  # re-assert the kind/attention binding
    optimizer = stage.optimizer()
    if resume_from is not None:
        weights, meta, extra = load_checkpoint(resume_from)
        if meta.get("stage") != stage.name:
            raise TrainingError(f"checkpoint {resume_from} belongs to stage {meta.get('stage')!r}")
        first = int(meta["step"])
        opt_state = OptimizerState.from_tensors(extra, int(meta["opt_step"]))
        parent = meta.get("parent", parent)
    else:
        weights, first = start.clone(), 0
        opt_state = OptimizerState.zeros_like(weights)
    result = TrainResult(weights, opt_state)
    data_id = stream.identifier()
    log_fh = open(log_path, "a") if log_path else None
    wanted = set(extra_checkpoints)
    best, since_best = -math.inf, 0
    try:
        for t in range(first, stage.steps):
            t0 = time.perf_counter()
            batch = stream.batch_at(t)
            gen = torch.Generator().manual_seed(step_seed(stage.seed, t))
            loss, aux, lr = train_step(weights, opt_state, optimizer, stage, batch, vocab, settings, gen)
            if lr is None or not weights.is_finite():
                dump = write_checkpoint(out_dir / f"{stage.name}_nan_{t}.ckpt", weights, opt_state,
                                        stage, t, parent, data_id)
                raise TrainingError(f"non-finite loss {loss} at step {t} of stage {stage.name}; state dumped to {dump}")
            result.losses.append(loss)
            if log_fh:
                rec = {"step": t + 1, "stage": stage.name, "loss": loss,
                       "learning_rate": lr, "wall_ms": (time.perf_counter() - t0) * 1e3}
                if stage.kind == DIFFUSION:
                    rec.update(L1=aux["L1"], L2=aux["L2"])
                log_fh.write(json.dumps(rec) + "\n")
            step = t + 1
            if (stage.checkpoint_every and step % stage.checkpoint_every == 0) or step in wanted:
                if step != stage.steps:
                    result.checkpoints.append(write_checkpoint(
                        checkpoint_path(out_dir, stage, step), weights, opt_state, stage, step, parent, data_id))
            if eval_fn is not None and eval_every and step % eval_every == 0:
                metric = eval_fn(weights)
                if metric > best:
                    best, since_best = metric, 0
                else:
                    since_best += 1
                    if since_best >= patience:
                        log.info("stage %s: no improvement in %d evaluations, stopping at step %d",
                                 stage.name, patience, step)
                        result.stopped_early = True
                        break
    finally:
        if log_fh:
            log_fh.close()
    final_step = first + len(result.losses)
    result.checkpoints.append(write_checkpoint(
        checkpoint_path(out_dir, stage, final_step), weights, opt_state, stage, final_step, parent, data_id))
    return result


# -- AR2Diff pipeline ----------------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    """AR pretraining, optional diffusion adaptation for each N, diffusion fine-tuning."""

    pretrain: Stage
    adapt: Stage
    finetune: Stage
    adaptation_steps: tuple[int, ...] = (0,)
    ancestor: str | None = None

    def __post_init__(self):
        if self.pretrain.kind != AR:
            raise ConfigError("stages.pretrain must be an AR stage")
        if self.adapt.kind != DIFFUSION or self.finetune.kind != DIFFUSION:
            raise ConfigError("stages.adapt and stages.finetune must be diffusion stages")
        if any(n < 0 for n in self.adaptation_steps):
            raise ConfigError("stages.adaptation_steps must be >= 0")
        object.__setattr__(self, "adaptation_steps", tuple(sorted(set(self.adaptation_steps))))

    def to_dict(self) -> dict:
        return {
            "pretrain": self.pretrain.to_dict(),
            "adapt": self.adapt.to_dict(),
            "finetune": self.finetune.to_dict(),
            "adaptation_steps": list(self.adaptation_steps),
            "ancestor": self.ancestor,
        }


def _stage_record(stage: Stage, data_id: str, start_hash: str | None, ckpts: Sequence[Path]) -> dict:
    return {
        "name": stage.name,
        "kind": stage.kind,
        "attention": stage.attention,
        "steps": stage.steps,
        "seed": stage.seed,
        "data": data_id,
        "start": start_hash,
        "checkpoints": [{"path": p.name, "sha256": file_hash(p)} for p in ckpts],
    }


def run_ar2diff(
    plan: StagePlan,
    init: Weights,
    pretrain_stream: DataStream,
    finetune_stream: DataStream,
    vocab: Vocab,
    out_dir: str | Path,
    settings: DiffusionSettings = DiffusionSettings(),
) -> tuple[dict[int, Weights], Path]:
    """Run every AR2Diff_N variant of ``plan`` from one shared AR ancestor.

    Adaptation for all N is a single diffusion run of ``max(N)`` steps with a
    checkpoint at each requested N.  The learning-rate schedule does not depend
    on the total step count, so the checkpoint at step N equals a standalone
    N-step run.  Returns ``({N: fine-tuned weights}, manifest path)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    if plan.ancestor is not None:
        if not Path(plan.ancestor).exists():
            raise TrainingError(f"missing ancestor checkpoint {plan.ancestor}")
        ar_weights, _, _ = load_checkpoint(plan.ancestor)
        ancestor_path = Path(plan.ancestor)
    else:
        res = train(plan.pretrain, init, pretrain_stream, vocab, out_dir,
                    log_path=out_dir / "metrics.jsonl")
        ar_weights, ancestor_path = res.weights, res.checkpoints[-1]
        records.append(_stage_record(plan.pretrain, pretrain_stream.identifier(), None, res.checkpoints))
    ancestor_hash = file_hash(ancestor_path)

    starts: dict[int, tuple[Weights, str]] = {}
    if 0 in plan.adaptation_steps:
        starts[0] = (ar_weights, ancestor_hash)
    positive = [n for n in plan.adaptation_steps if n > 0]
    if positive:
        adapt = Stage(**{**plan.adapt.to_dict(), "steps": max(positive)})
        adapt_stream = OffsetStream(pretrain_stream, plan.pretrain.steps)
        res = train(adapt, ar_weights, adapt_stream, vocab, out_dir, settings,
                    log_path=out_dir / "metrics.jsonl", parent=ancestor_hash, extra_checkpoints=positive)
        records.append(_stage_record(adapt, adapt_stream.identifier(), ancestor_hash, res.checkpoints))
        for n in positive:
            path = checkpoint_path(out_dir, adapt, n)
            starts[n] = (load_checkpoint(path)[0], file_hash(path))

    finals: dict[int, Weights] = {}
    variants = {}
    for n, (w, h) in sorted(starts.items()):
        ft = Stage(**{**plan.finetune.to_dict(), "name": f"{plan.finetune.name}_N{n}"})
        res = train(ft, w, finetune_stream, vocab, out_dir, settings,
                    log_path=out_dir / "metrics.jsonl", parent=h)
        finals[n] = res.weights
        records.append(_stage_record(ft, finetune_stream.identifier(), h, res.checkpoints))
        variants[str(n)] = {"start": h, "final": file_hash(res.checkpoints[-1]),
                            "checkpoint": res.checkpoints[-1].name}
    manifest = {
        "plan": plan.to_dict(),
        "ancestor": {"path": ancestor_path.name, "sha256": ancestor_hash},
        "stages": records,
        "variants": variants,
        "diffusion": settings.to_dict(),
    }
    path = out_dir / "ar2diff_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return finals, path
