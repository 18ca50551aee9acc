"""Line-oriented ``key = value`` experiment configuration."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields

from .exceptions import ConfigurationError
from .federation import FEDRS_PRIVATE_MESSAGE, LABEL_MODES, METHODS

DATASETS = ("fashion-mnist", "cifar10", "synthetic")
DEFAULT_POOL = {"fashion-mnist": 6000, "cifar10": 5000, "synthetic": 5000}


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    method: list[str] = field(default_factory=lambda: ["fedavg"])
    label_mode: list[str] = field(default_factory=lambda: ["private"])
    m: int = 10
    labels_per_client: list[int] = field(default_factory=lambda: [5])
    samples_per_client: int = 2000
    unlabeled_pool_size: int | None = None
    rounds: int = 100
    local_epochs: list[int] = field(default_factory=lambda: [1])
    batch_size: int = 64
    lr: float = 1e-3
    fedprox_mu: float = 1e-2
    fedrs_alpha: float = 0.5
    tuning_epochs: int = 3
    tuning_optimizer: str = "adam"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    output_dir: str = "results"
    encoder: str | None = None
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    fc_width: int = 64
    precision: int = 64
    workers: int = 1
    synthetic_classes: int = 10
    synthetic_features: int = 16
    synthetic_separation: float = 4.0
    synthetic_noise: float = 1.5
    synthetic_sharpness: float = 1.0
    synthetic_train_size: int = 60000
    synthetic_test_size: int = 10000
    synthetic_task_seed: int = 1234

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset: expected one of {DATASETS}, got {self.dataset!r}")
        for key, allowed in (("method", METHODS), ("label_mode", LABEL_MODES)):
            values = getattr(self, key)
            if not values:
                raise ConfigurationError(f"{key}: sweep list is empty")
            for v in values:
                if v not in allowed:
                    raise ConfigurationError(f"{key}: unknown value {v!r}; expected one of {allowed}")
        for key in ("labels_per_client", "local_epochs", "seeds"):
            if not getattr(self, key):
                raise ConfigurationError(f"{key}: sweep list is empty")
        if "fedrs" in self.method and "private" in self.label_mode:
            raise ConfigurationError(f"method: {FEDRS_PRIVATE_MESSAGE}")
        if self.tuning_optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"tuning_optimizer: expected adam or sgd, got {self.tuning_optimizer!r}")
        if self.encoder is None:
            self.encoder = "mlp" if self.dataset == "synthetic" else "cnn"
        if self.encoder not in ("mlp", "cnn"):
            raise ConfigurationError(f"encoder: expected mlp or cnn, got {self.encoder!r}")
        if self.encoder == "cnn" and self.dataset == "synthetic":
            raise ConfigurationError("encoder: the synthetic task has flat inputs; use mlp")
        if self.unlabeled_pool_size is None:
            self.unlabeled_pool_size = DEFAULT_POOL[self.dataset]
        if self.precision not in (32, 64):
            raise ConfigurationError("precision: expected 32 or 64")
        if self.m < 1:
            raise ConfigurationError("m: at least one client is required")
        if self.workers < 1:
            raise ConfigurationError("workers: must be positive")

    def cells(self):
        """Sweep points in deterministic order: (method, label_mode, L, E)."""
        return list(itertools.product(self.method, self.label_mode, self.labels_per_client, self.local_epochs))


def _field_types():
    hints = {}
    for f in fields(ExperimentConfig):
        t = str(f.type)
        if t.startswith("list[int]"):
            hints[f.name] = ("list", int)
        elif t.startswith("list[str]"):
            hints[f.name] = ("list", str)
        elif t.startswith("int"):
            hints[f.name] = ("scalar", int)
        elif t.startswith("float"):
            hints[f.name] = ("scalar", float)
        else:
            hints[f.name] = ("scalar", str)
    return hints


def _convert(key, raw, kind, typ):
    def one(token):
        token = token.strip()
        if typ is str:
            if not token:
                raise ConfigurationError(f"{key}: empty value")
            return token
        try:
            if typ is int:
                value = float(token)
                if not value.is_integer():
                    raise ValueError
                return int(value)
            return float(token)
        except ValueError:
            raise ConfigurationError(f"{key}: expected {typ.__name__}, got {token!r}") from None

    if kind == "list":
        parts = [p for p in raw.split(",")]
        if any(not p.strip() for p in parts):
            raise ConfigurationError(f"{key}: empty entry in list {raw!r}")
        return [one(p) for p in parts]
    if "," in raw:
        raise ConfigurationError(f"{key}: expected a single value, got a list")
    return one(raw)


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, lists are comma separated.

    Unknown or repeated keys and ill-typed values raise ``ConfigurationError``
    naming the key.
    """
    hints = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigurationError(f"{key}: unknown key (line {lineno})")
        if key in values:
            raise ConfigurationError(f"{key}: given twice (line {lineno})")
        values[key] = _convert(key, raw, *hints[key])
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
