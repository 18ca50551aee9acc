"""Evaluation, best-snapshot selection and percentile bootstrap intervals."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import UsageError


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    val_accuracy: float
    test_accuracy: float
    tuning_loss: list[float] | None = None
    wall_time: float = 0.0

    def as_dict(self):
        return asdict(self)


@dataclass
class RunResult:
    config: dict
    seed: int
    history: list[RoundRecord] = field(default_factory=list)
    best_round: int = -1
    best_test_accuracy: float = float("nan")

    def finalize(self) -> RunResult:
        self.best_round, self.best_test_accuracy = select_best_snapshot(self.history)
        return self


def accuracy(probabilities: np.ndarray, labels) -> float:
    """Top-1 accuracy; argmax ties go to the lowest label id."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UsageError("accuracy of an empty dataset is undefined")
    return float(np.mean(np.argmax(probabilities, axis=1) == labels))


def select_best_snapshot(history) -> tuple[int, float]:
    """(round, test accuracy) at the highest validation accuracy, earliest round on ties."""
    if not history:
        raise UsageError("empty history")
    best = max(range(len(history)), key=lambda i: (history[i].val_accuracy, -i))
    return history[best].round, history[best].test_accuracy


def bootstrap_ci(values, level: float = 0.95, n_boot: int = 10_000, rng=0) -> tuple[float, float, float]:
    """Percentile bootstrap interval of the mean: ``(low, high, mean)``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise UsageError("bootstrap needs at least one value")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mean = float(values.mean())
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    # resampled means of a constant vector can differ from ``mean`` in the last ulp
    return min(float(low), mean), max(float(high), mean), mean
