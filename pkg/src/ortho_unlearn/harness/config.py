"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment, lists are comma separated::

    dataset = features
    features_path = feats.bin
    strategy = static, in_training
    forget_classes = 0, 1, 2
    lambdas = 0.5, 1.0
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..unlearn import TrainConfig

STRATEGIES = ("static", "posthoc", "in_training", "moe")
DATASETS = ("mnist", "synthetic", "features")


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _words(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _batch(s):
    s = s.strip()
    return "full" if s == "full" else int(s)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "features"
    # mnist
    images: str = ""
    labels: str = ""
    # synthetic clusters (fed through an MLP backbone)
    n_classes: int = 10
    d_in: int = 32
    per_class: int = 200
    spread: float = 8.0
    data_seed: int = 0
    # precomputed features
    features_path: str = ""

    strategy: tuple = ("in_training",)
    forget_classes: tuple = (9, 5, 3)
    lambdas: tuple = (0.0, 0.25, 0.5, 1.0, 2.0)
    rank: int = 4
    sv_threshold: float = 1e-8

    # adapter training
    epochs: int = 30
    learning_rate: float = 0.5
    batch_size: object = "full"
    seed: int = 0
    init_scale: float = 0.01

    # baseline pretraining
    hidden: int = 128
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.1
    pretrain_batch: int = 64
    head_epochs: int = 100
    head_lr: float = 0.5
    head_batch: int = 1000
    checkpoint: str = ""

    # MoE gate
    gate_epochs: int = 30
    gate_lr: float = 0.5
    gate_batch: int = 512
    gate_retain_per_class: int = 100  # retain rows per class used to fit the gate, 0 = all

    holdout_frac: float = 0.2
    record_timing: bool = False
    output_dir: str = "results"

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        bad = [s for s in self.strategy if s not in STRATEGIES]
        if bad or not self.strategy:
            raise ConfigError(f"strategy must be drawn from {STRATEGIES}, got {list(self.strategy)}")
        if not self.lambdas:
            raise ConfigError("lambdas must be non-empty")
        if len(set(self.forget_classes)) != len(self.forget_classes):
            raise ConfigError(f"forget_classes must be distinct, got {list(self.forget_classes)}")
        if self.rank < 1:
            raise ConfigError("rank must be positive")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ConfigError("holdout_frac must lie in (0, 1)")
        if self.dataset == "mnist" and not (self.images and self.labels):
            raise ConfigError("dataset = mnist needs 'images' and 'labels' paths")
        if self.dataset == "features" and not self.features_path:
            raise ConfigError("dataset = features needs 'features_path'")
        self.train  # validates

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.batch_size, self.seed, self.init_scale)

    @property
    def gate_train(self) -> TrainConfig:
        return TrainConfig(self.gate_epochs, self.gate_lr, self.gate_batch, self.seed, 0.0)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}


_PARSERS = {
    "strategy": _words,
    "forget_classes": _ints,
    "lambdas": _floats,
    "batch_size": _batch,
    "record_timing": _bool,
}


def _coerce(name, raw):
    if name in _PARSERS:
        return _PARSERS[name](raw)
    default = ExperimentConfig.__dataclass_fields__[name].default
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_config(text, base_dir=None, **overrides) -> ExperimentConfig:
    """Parse config text; relative paths resolve against ``base_dir``."""
    known = ExperimentConfig.__dataclass_fields__
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if base_dir is not None:
        for key in ("images", "labels", "features_path", "checkpoint", "output_dir"):
            p = values.get(key)
            if p and not Path(p).is_absolute():
                values[key] = str(Path(base_dir) / p)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, base_dir=Path(path).resolve().parent, **overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, val in cfg.as_dict().items():
        if isinstance(val, list):
            val = ", ".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
