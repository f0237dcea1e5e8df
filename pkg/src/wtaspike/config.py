"""Flat ``section.key=value`` configuration files.

Three sections exist: ``model.*`` (:class:`ModelConfig`), ``task.*`` and
``train.*``. Lines starting with ``#`` and blank lines are ignored. Every
value is parsed according to the annotated type of its dataclass field.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

TASKS = ("copy", "mlm-synthetic", "char-lm")


@dataclass(frozen=True)
class TaskConfig:
    name: str = "copy"
    seq_len: int = 17        # copy: 2 * payload + 1
    alphabet: int = 12       # payload symbols for the synthetic tasks
    period: int = 3          # mlm-synthetic motif period
    mask_ratio: float = 0.15
    corpus: str = ""         # char-lm text file
    bos: bool = False

    def __post_init__(self):
        if self.name not in TASKS:
            raise ConfigError(f"task.name must be one of {', '.join(TASKS)}, got {self.name!r}")
        if self.seq_len < 2:
            raise ConfigError(f"task.seq_len must be >= 2, got {self.seq_len}")
        if self.name == "copy" and self.seq_len % 2 == 0:
            raise ConfigError(f"task.seq_len must be odd for the copy task, got {self.seq_len}")
        if not 2 <= self.alphabet <= 26:
            raise ConfigError(f"task.alphabet must lie in [2, 26], got {self.alphabet}")
        if self.period < 1:
            raise ConfigError(f"task.period must be >= 1, got {self.period}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"task.mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.name == "char-lm" and not self.corpus:
            raise ConfigError("task.corpus is required for the char-lm task")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 4
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.eval_interval < 1:
            raise ConfigError(f"train.eval_interval must be >= 1, got {self.eval_interval}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1), got {getattr(self, name)}")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError(f"train.warmup_frac must lie in [0, 1], got {self.warmup_frac}")


SECTIONS = {"model": ModelConfig, "task": TaskConfig, "train": TrainConfig}
# run manifests carry bookkeeping keys that a config reader skips
IGNORED_SECTIONS = ("run",)


def _parse_value(key: str, text: str, kind):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scalar_fields(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if hints[f.name] in (int, float, bool, str)}


def parse_flat(text: str) -> dict:
    """``key=value`` lines to a dict of raw strings, validating key shape."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section in IGNORED_SECTIONS:
            continue
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def from_flat(values: dict) -> TrainConfig:
    """Build a validated :class:`TrainConfig` from dotted keys (strings or typed values)."""
    parts = {name: {} for name in SECTIONS}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown key {key!r}")
        known = _scalar_fields(SECTIONS[section])
        if name not in known:
            raise ConfigError(f"unknown key {key!r}")
        kind = known[name]
        parts[section][name] = _parse_value(key, value, kind) if isinstance(value, str) else kind(value)
    model = ModelConfig(**parts["model"])
    task = TaskConfig(**parts["task"])
    return TrainConfig(model=model, task=task, **parts["train"])


def to_flat(cfg: TrainConfig) -> dict:
    """Every field materialised as ``section.key -> string``, in a stable order."""
    out = {}
    for section, obj in (("model", cfg.model), ("task", cfg.task), ("train", cfg)):
        for name in _scalar_fields(type(obj)):
            out[f"{section}.{name}"] = _format_value(getattr(obj, name))
    return out


def format_flat(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return from_flat(parse_flat(text))


def model_from_flat(values: dict) -> ModelConfig:
    sub = {k: v for k, v in values.items() if k.startswith("model.")}
    return from_flat(sub).model
