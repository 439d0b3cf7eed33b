"""Run configuration: a single JSON document, strictly validated.

Unknown keys are rejected so that typos fail loudly.  Every error message
names the offending field path (e.g. ``sampler.tau``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import Vocab
from .decoding import SamplerSettings
from .losses import DiffusionSettings
from .model import ConfigError, ModelConfig
from .tasks import SubstitutionCipherTask, TaskSpec, task_from_dict
from .training import AR, DIFFUSION, Stage, StagePlan


@dataclass(frozen=True)
class CorpusConfig:
    objective: str = "prefix_lm"
    seq_len: int = 64
    target_len: int = 24
    code_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> "CorpusConfig":
        if self.objective not in ("prefix_lm", "span_corruption"):
            raise ConfigError("pretrain_data.objective must be prefix_lm or span_corruption")
        if not 0 <= self.code_fraction <= 1:
            raise ConfigError("pretrain_data.code_fraction must lie in [0, 1]")
        if self.target_len + 2 > self.seq_len:
            raise ConfigError("pretrain_data.target_len must leave room for an input region")
        return self


@dataclass(frozen=True)
class TaskDataConfig:
    n_train: int = 10000
    n_test: int = 200
    seed: int = 0

    def validate(self) -> "TaskDataConfig":
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("task_data.n_train and task_data.n_test must be >= 1")
        return self


@dataclass(frozen=True)
class Paths:
    checkpoints: str = "runs/checkpoints"
    logs: str = "runs/logs"
    reports: str = "runs/reports"

    def validate(self) -> "Paths":
        return self

    def ensure_writable(self) -> None:
        for name in ("checkpoints", "logs", "reports"):
            p = Path(getattr(self, name))
            try:
                p.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise ConfigError(f"paths.{name}: cannot create {p}: {exc.strerror}") from None
            if not os.access(p, os.W_OK):
                raise ConfigError(f"paths.{name}: {p} is not writable")


STAGE_KINDS = {"pretrain": AR, "adapt": DIFFUSION, "finetune": DIFFUSION}
STAGE_FIELDS = {f.name for f in dataclasses.fields(Stage)} - {"name", "kind"}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    stages: StagePlan
    sampler: SamplerSettings = SamplerSettings()
    diffusion: DiffusionSettings = DiffusionSettings()
    task: TaskSpec = field(default_factory=SubstitutionCipherTask)
    task_data: TaskDataConfig = TaskDataConfig()
    pretrain_data: CorpusConfig = CorpusConfig()
    paths: Paths = Paths()
    seed: int = 0

    def to_dict(self) -> dict:
        stages = self.stages.to_dict()
        for key in STAGE_KINDS:
            stages[key] = {k: v for k, v in stages[key].items() if k not in ("name", "kind")}
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "stages": stages,
            "sampler": self.sampler.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "task": self.task.to_dict(),
            "task_data": dataclasses.asdict(self.task_data),
            "pretrain_data": dataclasses.asdict(self.pretrain_data),
            "paths": dataclasses.asdict(self.paths),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _section(data: Any, path: str) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object")
    return data


def _build(cls, data: Any, path: str, extra: dict | None = None):
    data = _section(data, path)
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}")
    kwargs = dict(extra or {})
    kwargs.update(data)
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(path) or path in msg else f"{path}: {msg}") from None
    _check_types(obj, path)
    return obj.validate() if hasattr(obj, "validate") else obj


def _check_types(obj, path: str) -> None:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool) or default is None:
            continue
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}.{f.name} must be a number")
            if isinstance(default, int) and not isinstance(v, int):
                raise ConfigError(f"{path}.{f.name} must be an integer")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{path}.{f.name} must be a string")


def config_from_dict(raw: dict) -> RunConfig:
    raw = _section(raw, "config")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown key {key}")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    model_raw = dict(_section(raw.get("model"), "model"))
    model_raw.setdefault("vocab_size", len(Vocab()))
    model_raw.setdefault("seed", seed)
    model = _build(ModelConfig, model_raw, "model")
    if model.vocab_size < len(Vocab()):
        raise ConfigError(f"model.vocab_size must cover the {len(Vocab())}-token vocabulary")

    stages_raw = _section(raw.get("stages"), "stages")
    for key in stages_raw:
        if key not in (*STAGE_KINDS, "adaptation_steps", "ancestor"):
            raise ConfigError(f"unknown key stages.{key}")
    built = {}
    for name, kind in STAGE_KINDS.items():
        sec = _section(stages_raw.get(name), f"stages.{name}")
        for key in sec:
            if key not in STAGE_FIELDS:
                raise ConfigError(f"unknown key stages.{name}.{key}")
        defaults = {"steps": 0, "seed": seed}
        built[name] = _build(Stage, {**defaults, **sec}, f"stages.{name}", {"name": name, "kind": kind})
    adaptation = stages_raw.get("adaptation_steps", [0])
    if not isinstance(adaptation, list) or not all(isinstance(n, int) for n in adaptation):
        raise ConfigError("stages.adaptation_steps must be a list of integers")
    try:
        plan = StagePlan(built["pretrain"], built["adapt"], built["finetune"], tuple(adaptation),
                         stages_raw.get("ancestor"))
    except ConfigError as exc:
        raise ConfigError(f"stages: {exc}") from None

    task_raw = raw.get("task")
    try:
        task = task_from_dict(_section(task_raw, "task")) if task_raw is not None else SubstitutionCipherTask()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"task: {exc}") from None
    # the decode window follows the task unless set explicitly
    sampler = _build(SamplerSettings, raw.get("sampler"), "sampler",
                     {"seed": seed, "target_window": task.target_window})
    if task.target_window + 2 > model.max_seq_len:
        raise ConfigError("task.target_window does not fit model.max_seq_len")
    diffusion = _build(DiffusionSettings, raw.get("diffusion"), "diffusion")
    pretrain_data = _build(CorpusConfig, raw.get("pretrain_data"), "pretrain_data", {"seed": seed})
    if pretrain_data.seq_len > model.max_seq_len:
        raise ConfigError("pretrain_data.seq_len exceeds model.max_seq_len")
    return RunConfig(
        model=model,
        stages=plan,
        sampler=sampler,
        diffusion=diffusion,
        task=task,
        task_data=_build(TaskDataConfig, raw.get("task_data"), "task_data", {"seed": seed}),
        pretrain_data=pretrain_data,
        paths=_build(Paths, raw.get("paths"), "paths"),
        seed=seed,
    )


def load_config(path: str | Path) -> RunConfig:
    """Parse, default and validate a JSON config file."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return config_from_dict(raw)
