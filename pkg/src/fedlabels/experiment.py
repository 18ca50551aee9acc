"""Sweeps over (method, label mode, labels per client, local epochs) x seeds, and result files."""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, SyntheticTask, data_dir, load_cifar10, load_fashion_mnist, partition
from .federation import FederationConfig, build_clients, init_server, run_federation
from .metrics import RunResult, bootstrap_ci
from .nn import EncoderSpec, Network

log = logging.getLogger(__name__)

KEY_COLUMNS = ["dataset", "method", "label_mode", "labels_per_client", "local_epochs"]
SEED_COLUMNS = KEY_COLUMNS + ["seed", "best_test_acc", "best_round"]
AGGREGATE_COLUMNS = KEY_COLUMNS + ["mean", "ci_low", "ci_high"]
FLOAT_COLUMNS = {"best_test_acc", "mean", "ci_low", "ci_high"}


@dataclass
class ResultsTable:
    rows: list[dict] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows, failures=()):
        table = cls([_normalise(r, SEED_COLUMNS) for r in rows], [], list(failures))
        groups: dict[tuple, list[float]] = {}
        for r in table.rows:
            groups.setdefault(tuple(r[k] for k in KEY_COLUMNS), []).append(r["best_test_acc"])
        for key, accs in groups.items():
            low, high, mean = bootstrap_ci(accs, rng=0)
            table.aggregates.append(
                _normalise({**dict(zip(KEY_COLUMNS, key)), "mean": mean, "ci_low": low, "ci_high": high}, AGGREGATE_COLUMNS)
            )
        return table


def _normalise(row, columns):
    out = {}
    for c in columns:
        v = row[c]
        if c in FLOAT_COLUMNS:
            out[c] = round(float(v), 6)
        elif c in ("labels_per_client", "local_epochs", "seed", "best_round"):
            out[c] = int(v)
        else:
            out[c] = str(v)
    return out


def _format(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_format(r[c]) for c in columns])
    return buf.getvalue()


def emit(table: ResultsTable, fmt: str, directory) -> list[Path]:
    """Write ``results`` and ``aggregate`` files as CSV or JSON; returns the paths written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        paths = [d / "results.csv", d / "aggregate.csv"]
        paths[0].write_text(to_csv(table.rows, SEED_COLUMNS))
        paths[1].write_text(to_csv(table.aggregates, AGGREGATE_COLUMNS))
        return paths
    if fmt == "json":
        path = d / "results.json"
        path.write_text(json.dumps({"rows": table.rows, "aggregates": table.aggregates}, indent=1) + "\n")
        return [path]
    raise ValueError(f"unknown format {fmt!r}")


def read_json(path) -> ResultsTable:
    doc = json.loads(Path(path).read_text())
    return ResultsTable(doc["rows"], doc["aggregates"])


# --------------------------------------------------------------------------
# data and cells


def synthetic_task(config: ExperimentConfig) -> SyntheticTask:
    return SyntheticTask.make(
        config.synthetic_classes, config.synthetic_features, separation=config.synthetic_separation,
        noise=config.synthetic_noise, sharpness=config.synthetic_sharpness, rng=config.synthetic_task_seed,
    )


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset, int]:
    """(train, test, number of labels) for the configured dataset."""
    if config.dataset == "synthetic":
        task = synthetic_task(config)
        rng = np.random.default_rng([config.synthetic_task_seed, 1])
        return task.sample(config.synthetic_train_size, rng), task.sample(config.synthetic_test_size, rng), task.n_classes
    directory = data_dir(config.data_dir)
    if directory is None:
        raise FileNotFoundError(f"dataset {config.dataset} needs data_dir or FEDLABELS_DATA_DIR")
    loader = load_fashion_mnist if config.dataset == "fashion-mnist" else load_cifar10
    train, test = loader(directory)
    return train, test, 10


def encoder_spec(config: ExperimentConfig, input_shape) -> EncoderSpec:
    if config.encoder == "mlp":
        return EncoderSpec("mlp", (int(np.prod(input_shape)),), tuple(config.hidden))
    return EncoderSpec("cnn", tuple(input_shape), fc_width=config.fc_width)


def cell_name(config, method, mode, L, E, seed) -> str:
    return f"{config.dataset}_{method}_{mode}_L{L}_E{E}_seed{seed}"


def run_cell(config: ExperimentConfig, method: str, mode: str, L: int, E: int, seed: int, data=None) -> RunResult:
    train, test, n_labels = data if data is not None else load_data(config)
    dtype = np.float64 if config.precision == 64 else np.float32
    if config.encoder == "mlp" and train.images.ndim > 2:
        train = Dataset(train.images.reshape(len(train), -1), train.labels, train.provenance)
        test = Dataset(test.images.reshape(len(test), -1), test.labels, test.provenance)
    train = Dataset(train.images.astype(dtype, copy=False), train.labels, train.provenance)
    test = Dataset(test.images.astype(dtype, copy=False), test.labels, test.provenance)
    plan = partition(train, config.m, L, config.samples_per_client, config.unlabeled_pool_size, np.random.default_rng(seed), n_labels=n_labels)
    net = Network(encoder_spec(config, train.images.shape[1:]), dtype=dtype)
    fed = FederationConfig(
        method=method, label_mode=mode, rounds=config.rounds, local_epochs=E, batch_size=config.batch_size,
        lr=config.lr, fedprox_mu=config.fedprox_mu, fedrs_alpha=config.fedrs_alpha, tuning_epochs=config.tuning_epochs,
        tuning_optimizer=config.tuning_optimizer, seed=seed,
    )
    pool = train.images[plan.pool_indices]
    server = init_server(net, plan.label_sets, n_labels, seed, pool=pool)
    result = run_federation(net, server, build_clients(train, plan), fed, test)
    result.config.update(dataset=config.dataset, labels_per_client=L, m=config.m, samples_per_client=config.samples_per_client)
    return result


def _cell_job(args):
    config, cell, seed = args
    try:
        return run_cell(config, *cell, seed), None
    except Exception as exc:  # a failed cell is recorded, the sweep continues
        log.error("cell %s seed %d failed: %s", cell, seed, exc)
        return None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def write_history(result: RunResult, path: Path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")


def run(config: ExperimentConfig, output_dir=None) -> ResultsTable:
    """Run every (sweep point, seed) cell, write results, and return the table."""
    out = Path(output_dir or config.output_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config, cell, seed) for cell in config.cells() for seed in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_cell_job, jobs))
    else:
        try:
            data, data_error = load_data(config), None
        except Exception as exc:
            data, data_error = None, f"{type(exc).__name__}: {exc}"
            log.error("loading %s failed: %s", config.dataset, exc)
        outcomes = []
        for _, cell, seed in jobs:
            if data_error is not None:
                outcomes.append((None, data_error))
                continue
            try:
                outcomes.append((run_cell(config, *cell, seed, data=data), None))
            except Exception as exc:  # a failed cell is recorded, the sweep continues
                log.error("cell %s seed %d failed: %s", cell, seed, exc)
                outcomes.append((None, f"{type(exc).__name__}: {exc}"))
    rows, failures = [], []
    for (_, (method, mode, L, E), seed), (result, error) in zip(jobs, outcomes):
        key = dict(dataset=config.dataset, method=method, label_mode=mode, labels_per_client=L, local_epochs=E, seed=seed)
        if result is None:
            failures.append({**key, "error": error})
            continue
        write_history(result, runs_dir / (cell_name(config, method, mode, L, E, seed) + ".jsonl"))
        rows.append({**key, "best_test_acc": result.best_test_accuracy, "best_round": result.best_round})
    table = ResultsTable.from_rows(rows, failures)
    emit(table, "csv", out)
    emit(table, "json", out)
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=1) + "\n")
    return table
