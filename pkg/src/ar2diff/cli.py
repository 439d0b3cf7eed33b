"""Command-line entry point: ``ar2diff <subcommand> [flags]``.

Numeric flags override the matching config field.  Each invocation writes a
manifest under ``<logs>/manifests`` with the effective config, its hash, the
seeds used and content hashes of every checkpoint read or written.  Failures
print a single JSON line on stderr and exit nonzero.

Set ``AR2DIFF_LOG_LEVEL`` (e.g. ``INFO``) for progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path
from typing import Sequence

import torch
from filelock import FileLock, Timeout

from . import __version__
from .bench import latency_benchmark, linear_fit_r2
from .checkpoint import CheckpointError, file_hash, load_checkpoint
from .config import RunConfig, config_from_dict
from .data import Vocab, strip_pads
from .decoding import AR_DEFAULT_TEMPERATURE, SamplerSettings, ar_generate, diffusion_decode
from .manifest import changed_files, file_record, snapshot, write_manifest
from .metrics import METRICS, evaluate, sweep
from .model import AttentionMode, ConfigError, Weights, init_weights
from .optim import OptimizerState
from .report import write_report
from .tasks import train_test_split
from .training import (
    AR,
    DIFFUSION,
    CorpusStream,
    OffsetStream,
    Stage,
    TaskStream,
    TrainingError,
    checkpoint_path,
    train,
    write_checkpoint,
)

log = logging.getLogger("ar2diff")

COMMANDS = ("pretrain", "adapt", "finetune", "decode", "eval", "sweep", "bench")
TRAIN_COMMANDS = ("pretrain", "adapt", "finetune")

# flag dest -> config field; "{stage}" is filled with the subcommand name
STAGE_FLAGS = {
    "steps": "stages.{stage}.steps",
    "lr": "stages.{stage}.lr",
    "warmup_steps": "stages.{stage}.warmup_steps",
    "batch_size": "stages.{stage}.batch_size",
    "checkpoint_every": "stages.{stage}.checkpoint_every",
    "seed": "stages.{stage}.seed",
}
DIFFUSION_FLAGS = {
    "unroll_temperature": "diffusion.unroll_temperature",
    "w1": "diffusion.w1",
    "w2": "diffusion.w2",
}
SAMPLER_FLAGS = {
    "num_steps": "sampler.num_steps",
    "num_samples": "sampler.num_samples",
    "tau": "sampler.tau",
    "target_window": "sampler.target_window",
    "seed": "sampler.seed",
}
PATH_FLAGS = {
    "checkpoints": "paths.checkpoints",
    "logs": "paths.logs",
    "reports": "paths.reports",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ar2diff", description="AR pretraining, diffusion adaptation and decoding.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        for flag in PATH_FLAGS:
            p.add_argument(f"--{flag}", help=f"override paths.{flag}")

    for name in TRAIN_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        common(p)
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--warmup-steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--resume", help="mid-stage checkpoint to continue from")
        if name != "pretrain":
            p.add_argument("--from", dest="init", required=True, help="checkpoint to start from")
            p.add_argument("--unroll-temperature", type=float)
            p.add_argument("--w1", type=float)
            p.add_argument("--w2", type=float)

    def sampler_flags(p):
        p.add_argument("--num-steps", type=int)
        p.add_argument("--num-samples", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--target-window", type=int)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("decode", help="decode one prompt, JSON in and out")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", help="prompt text")
    p.add_argument("--request", help="JSON request file, '-' for stdin")
    p.add_argument("--mode", choices=("diffusion", "ar"), default=None)
    p.add_argument("--ar-mode", choices=("greedy", "temperature"), default=None)
    p.add_argument("--temperature", type=float, default=None)
    sampler_flags(p)

    for name in ("eval", "sweep"):
        p = sub.add_parser(name, help="score a checkpoint on the task test split" if name == "eval"
                           else "exact match over a num_steps x num_samples grid")
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--metric", choices=METRICS, default="exact_match")
        p.add_argument("--split", choices=("test", "train"), default="test")
        p.add_argument("--limit", type=int, help="evaluate only the first LIMIT pairs")
        sampler_flags(p)
        if name == "eval":
            p.add_argument("--mode", choices=("diffusion", "ar"), default="diffusion")
        else:
            p.add_argument("--steps-grid", type=_int_list, default=[5, 10, 20])
            p.add_argument("--samples-grid", type=_int_list, default=[4, 8, 16])

    p = sub.add_parser("bench", help="AR vs diffusion decode latency")
    common(p)
    p.add_argument("--checkpoint", help="weights to time (a fresh model from the config when omitted)")
    p.add_argument("--lengths", type=_int_list, default=[64, 128, 256, 512])
    p.add_argument("--num-steps", type=int)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int)
    return parser


# -- config merging ------------------------------------------------------------------


def _set(raw: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = raw
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key} must be an object")
    node[leaf] = value


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line flags applied on top."""
    raw: dict = {}
    if args.config:
        text = Path(args.config).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    flags = dict(PATH_FLAGS)
    if args.command in TRAIN_COMMANDS:
        flags.update({k: v.format(stage=args.command) for k, v in STAGE_FLAGS.items()})
        if args.command != "pretrain":
            flags.update(DIFFUSION_FLAGS)
    else:
        flags.update(SAMPLER_FLAGS)
    for dest, dotted in flags.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set(raw, dotted, value)
    return config_from_dict(raw)


# -- helpers ---------------------------------------------------------------------------


class RunContext:
    """Tracks consumed files and writes the manifest at the end of a run."""

    def __init__(self, command: str, cfg: RunConfig, argv: Sequence[str]):
        self.command = command
        self.cfg = cfg
        self.argv = list(argv)
        self.consumed: list[str] = []
        self.seeds: dict = {"global": cfg.seed}
        self.result: dict = {}
        self.roots = [cfg.paths.checkpoints, cfg.paths.logs, cfg.paths.reports]
        self.started = time.time()
        self.before = snapshot(self.roots)

    def consume(self, path: str | os.PathLike) -> None:
        self.consumed.append(str(path))

    def finish(self, status: str, error: str | None = None) -> Path:
        produced = changed_files(self.before, snapshot(self.roots))
        record = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "error": error,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "seeds": self.seeds,
            "consumed": [file_record(p) for p in self.consumed if Path(p).exists()],
            "produced": [file_record(p) for p in produced if Path(p).exists()],
            "result": self.result,
            "wall_s": round(time.time() - self.started, 3),
            "version": __version__,
        }
        return write_manifest(self.cfg.paths.logs, self.command, record)


@contextmanager
def checkpoint_lock(directory: str | os.PathLike):
    lock = FileLock(str(Path(directory) / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise TrainingError(f"checkpoint directory {directory} is locked by another process") from None
    try:
        yield
    finally:
        lock.release()


def _load(ctx: RunContext, path: str) -> tuple[Weights, dict]:
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    ctx.consume(path)
    weights, meta, _ = load_checkpoint(path)
    return weights, meta


def _stage(cfg: RunConfig, name: str) -> Stage:
    return getattr(cfg.stages, name)


def _require_attention(meta: dict, path: str, expected: set[str], command: str) -> None:
    got = meta.get("attention")
    if got not in expected:
        raise TrainingError(
            f"attention mode mismatch: {command} needs a checkpoint with attention in "
            f"{sorted(expected)}, but {path} has attention={got!r}"
        )


def _corpus_stream(cfg: RunConfig, vocab: Vocab, batch_size: int) -> CorpusStream:
    pd = cfg.pretrain_data
    return CorpusStream(vocab, seed=pd.seed, batch_size=batch_size, seq_len=pd.seq_len,
                        target_len=pd.target_len, objective=pd.objective, code_fraction=pd.code_fraction)


def _split(cfg: RunConfig, which: str, limit: int | None = None):
    td = cfg.task_data
    train_pairs, test_pairs = train_test_split(cfg.task, td.seed, td.n_train, td.n_test)
    pairs = test_pairs if which == "test" else train_pairs
    return pairs[:limit] if limit else pairs


def _train_summary(result, ctx: RunContext) -> None:
    ctx.result.update({
        "steps_run": len(result.losses),
        "final_loss": result.losses[-1] if result.losses else None,
        "checkpoint": str(result.checkpoints[-1]),
        "sha256": file_hash(result.checkpoints[-1]),
    })


# -- subcommands -------------------------------------------------------------------------


def cmd_pretrain(args, cfg: RunConfig, ctx: RunContext) -> None:
    stage = _stage(cfg, "pretrain")
    vocab = Vocab()
    ctx.seeds.update(model=cfg.model.seed, stage=stage.seed, data=cfg.pretrain_data.seed)
    if args.resume:
        ctx.consume(args.resume)
    stream = _corpus_stream(cfg, vocab, stage.batch_size)
    result = train(stage, init_weights(cfg.model), stream, vocab, cfg.paths.checkpoints,
                   resume_from=args.resume, log_path=Path(cfg.paths.logs) / "metrics.jsonl")
    _train_summary(result, ctx)


def cmd_adapt(args, cfg: RunConfig, ctx: RunContext) -> None:
    stage = _stage(cfg, "adapt")
    vocab = Vocab()
    weights, meta = _load(ctx, args.init)
    _require_attention(meta, args.init, {AttentionMode.CAUSAL, AttentionMode.PREFIX}, "adapt")
    parent = file_hash(args.init)
    ctx.seeds.update(stage=stage.seed, data=cfg.pretrain_data.seed)
    if stage.steps == 0:
        # AR2Diff_0: same weights, relabelled for bidirectional training
        path = write_checkpoint(checkpoint_path(Path(cfg.paths.checkpoints), stage, 0), weights,
                                OptimizerState.zeros_like(weights), stage, 0, parent, "none")
        ctx.result.update(checkpoint=str(path), sha256=file_hash(path), steps_run=0)
        return
    if args.resume:
        ctx.consume(args.resume)
    stream = OffsetStream(_corpus_stream(cfg, vocab, stage.batch_size), int(meta.get("step", 0)))
    result = train(stage, weights, stream, vocab, cfg.paths.checkpoints, cfg.diffusion,
                   resume_from=args.resume, log_path=Path(cfg.paths.logs) / "metrics.jsonl", parent=parent)
    _train_summary(result, ctx)


def cmd_finetune(args, cfg: RunConfig, ctx: RunContext) -> None:
    stage = _stage(cfg, "finetune")
    vocab = Vocab()
    weights, meta = _load(ctx, args.init)
    _require_attention(meta, args.init, {AttentionMode.FULL}, "finetune")
    ctx.seeds.update(stage=stage.seed, task=cfg.task_data.seed)
    if args.resume:
        ctx.consume(args.resume)
    pairs = _split(cfg, "train")
    stream = TaskStream(vocab, pairs, cfg.task.target_window, stage.batch_size,
                        weights.config.max_seq_len, stage.seed, cfg.task.kind)
    result = train(stage, weights, stream, vocab, cfg.paths.checkpoints, cfg.diffusion,
                   resume_from=args.resume, log_path=Path(cfg.paths.logs) / "metrics.jsonl",
                   parent=file_hash(args.init))
    _train_summary(result, ctx)


def _read_request(args) -> dict:
    if args.request:
        text = sys.stdin.read() if args.request == "-" else Path(args.request).read_text()
        try:
            req = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"request:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(req, dict) or "prompt" not in req:
            raise ConfigError("request must be a JSON object with a 'prompt' field")
        return req
    if args.prompt is None:
        raise UsageError("decode needs --prompt or --request")
    return {"prompt": args.prompt}


def decode_request(weights: Weights, meta: dict, req: dict, sampler: SamplerSettings) -> dict:
    """Answer one decode request ``{prompt, mode, ...}`` with ``{output, candidates?, scores?, timing_ms}``."""
    known = {"prompt", "mode", "num_steps", "num_samples", "tau", "target_window", "seed",
             "ar_mode", "temperature"}
    unknown = sorted(set(req) - known)
    if unknown:
        raise ConfigError(f"unknown request key {unknown[0]}")
    vocab = Vocab()
    mode = req.get("mode", "diffusion")
    attention = meta.get("attention")
    if mode == "diffusion" and attention != AttentionMode.FULL:
        raise TrainingError(f"attention mode mismatch: diffusion decoding needs a full-attention "
                            f"checkpoint, got {attention!r}")
    if mode == "ar" and attention == AttentionMode.FULL:
        raise TrainingError("attention mode mismatch: AR decoding needs a causal or prefix checkpoint")
    fields = {k: req[k] for k in ("num_steps", "num_samples", "tau", "target_window", "seed") if k in req}
    settings = SamplerSettings(**{**sampler.to_dict(), **fields}).validate()
    prompt = vocab.tokenize(req["prompt"])
    t0 = time.perf_counter()
    if mode == "diffusion":
        res = diffusion_decode(weights, prompt, settings, vocab)
        out = {
            "output": vocab.detokenize(strip_pads(res.winner)),
            "candidates": [vocab.detokenize(strip_pads(c)) for c in res.candidates.tolist()],
            "scores": [float(s) for s in res.scores],
            "winner_index": res.winner_index,
        }
    elif mode == "ar":
        ar_mode = req.get("ar_mode", "greedy")
        gen = torch.Generator().manual_seed(settings.seed)
        ids = torch.tensor([prompt + [vocab.sep_id]], dtype=torch.long)
        new = ar_generate(weights, ids, settings.target_window, ar_mode,
                          req.get("temperature", AR_DEFAULT_TEMPERATURE), gen)
        out = {"output": vocab.detokenize(strip_pads(new[0].tolist()))}
    else:
        raise ConfigError(f"unknown decode mode {mode!r}")
    out["timing_ms"] = (time.perf_counter() - t0) * 1e3
    out["mode"] = mode
    return out


def cmd_decode(args, cfg: RunConfig, ctx: RunContext) -> None:
    weights, meta = _load(ctx, args.checkpoint)
    req = _read_request(args)
    for key in ("mode", "ar_mode", "temperature"):
        if getattr(args, key) is not None:
            req[key] = getattr(args, key)
    ctx.seeds["sampler"] = req.get("seed", cfg.sampler.seed)
    response = decode_request(weights, meta, req, cfg.sampler)
    ctx.result = response
    print(json.dumps(response))


def cmd_eval(args, cfg: RunConfig, ctx: RunContext) -> None:
    weights, meta = _load(ctx, args.checkpoint)
    expected = {AttentionMode.FULL} if args.mode == "diffusion" else {AttentionMode.CAUSAL, AttentionMode.PREFIX}
    _require_attention(meta, args.checkpoint, expected, f"eval --mode {args.mode}")
    ctx.seeds.update(sampler=cfg.sampler.seed, task=cfg.task_data.seed)
    pairs = _split(cfg, args.split, args.limit)
    model_id = Path(args.checkpoint).stem
    report = evaluate(weights, cfg.task, pairs, Vocab(), cfg.sampler, args.metric, args.mode, model_id)
    paths = write_report(cfg.paths.reports, f"eval_{model_id}", metrics=[report],
                         config_hash=cfg.hash(), seeds=ctx.seeds)
    ctx.result = {"metric": report.metric, "value": report.value, "n": report.n_examples,
                  "files": [str(p) for p in paths]}
    print(json.dumps(ctx.result))


def cmd_sweep(args, cfg: RunConfig, ctx: RunContext) -> None:
    weights, meta = _load(ctx, args.checkpoint)
    _require_attention(meta, args.checkpoint, {AttentionMode.FULL}, "sweep")
    ctx.seeds.update(sampler=cfg.sampler.seed, task=cfg.task_data.seed)
    pairs = _split(cfg, args.split, args.limit)
    model_id = Path(args.checkpoint).stem
    grid = sweep(weights, cfg.task, pairs, Vocab(), args.steps_grid, args.samples_grid, cfg.sampler,
                 args.metric, model_id)
    flat = [r for row in grid for r in row]
    paths = write_report(cfg.paths.reports, f"sweep_{model_id}", metrics=flat,
                         config_hash=cfg.hash(), seeds=ctx.seeds)
    ctx.result = {"grid": [[r.value for r in row] for row in grid], "steps": args.steps_grid,
                  "samples": args.samples_grid, "files": [str(p) for p in paths]}
    print(json.dumps(ctx.result))


def cmd_bench(args, cfg: RunConfig, ctx: RunContext) -> None:
    if args.checkpoint:
        weights, _ = _load(ctx, args.checkpoint)
    else:
        weights = init_weights(cfg.model)
    ctx.seeds.update(sampler=cfg.sampler.seed, model=weights.config.seed)
    records = latency_benchmark(weights, Vocab(), args.lengths, cfg.sampler.num_steps, args.reps,
                                args.warmup, cfg.sampler.seed)
    paths = write_report(cfg.paths.reports, "bench", latency=records, config_hash=cfg.hash(), seeds=ctx.seeds)
    ar = [r for r in records if r.kind == AR]
    diff = [r for r in records if r.kind == DIFFUSION]
    ctx.result = {
        "ar_linear_r2": linear_fit_r2([r.length for r in ar], [r.median_ms for r in ar]) if len(ar) > 1 else None,
        "ratio": [a.median_ms / d.median_ms for a, d in zip(ar, diff)],
        "files": [str(p) for p in paths],
    }
    print(json.dumps(ctx.result))


HANDLERS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "finetune": cmd_finetune,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def _error_line(kind: str, message: str, command: str | None) -> None:
    print(json.dumps({"error": kind, "message": message, "command": command}), file=sys.stderr)


def _setup_logging() -> None:
    level = os.environ.get("AR2DIFF_LOG_LEVEL", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise UsageError(f"AR2DIFF_LOG_LEVEL={level!r} is not a logging level")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = None
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = effective_config(args)
        cfg.paths.ensure_writable()
    except (UsageError, ConfigError, OSError) as exc:
        _error_line("usage" if isinstance(exc, UsageError) else "config", str(exc), command)
        return 2
    ctx = RunContext(command, cfg, argv)
    lock = checkpoint_lock(cfg.paths.checkpoints) if command in TRAIN_COMMANDS else nullcontext()
    try:
        with lock:
            HANDLERS[command](args, cfg, ctx)
    except (UsageError, ConfigError) as exc:
        ctx.finish("error", str(exc))
        _error_line("usage" if isinstance(exc, UsageError) else "config", str(exc), command)
        return 2
    except (TrainingError, CheckpointError, ValueError, OSError) as exc:
        ctx.finish("error", str(exc))
        _error_line(type(exc).__name__, str(exc), command)
        return 1
    path = ctx.finish("ok")
    log.info("manifest written to %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
