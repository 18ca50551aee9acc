"""Round orchestration and aggregation for public and private client label sets."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import combiner
from .data import Dataset, LabelSet, renormalize
from .exceptions import ConfigurationError, NumericalError, UsageError
from .metrics import RoundRecord, RunResult, accuracy
from .nn import Network, ParameterSet, make_optimizer, softmax

log = logging.getLogger(__name__)

METHODS = ("fedavg", "fedprox", "fedrs", "tune_pairwise", "tune_mse")
LABEL_MODES = ("public", "private")
FEDRS_PRIVATE_MESSAGE = "FedRS is not applicable with private labels"

# RNG stream tags, combined with (seed, ...) into a SeedSequence
_INIT, _CLIENT, _TUNE = 0, 1, 2


@dataclass
class FederationConfig:
    method: str = "fedavg"
    label_mode: str = "private"
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    fedprox_mu: float = 1e-2
    fedrs_alpha: float = 0.5
    tuning_epochs: int = 3
    tuning_optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method: unknown method {self.method!r}; expected one of {METHODS}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigurationError(f"label_mode: expected one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.method == "fedrs" and self.label_mode == "private":
            raise ConfigurationError(f"method: {FEDRS_PRIVATE_MESSAGE}")
        if self.tuning_optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"tuning_optimizer: expected adam or sgd, got {self.tuning_optimizer!r}")
        for name in ("rounds", "local_epochs", "tuning_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name}: must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size: must be positive")

    @property
    def private(self) -> bool:
        return self.label_mode == "private"

    @property
    def tuning_loss(self) -> str | None:
        return {"tune_pairwise": "pairwise", "tune_mse": "mse"}.get(self.method)

    def as_dict(self):
        return asdict(self)


@dataclass
class ClientState:
    cid: int
    label_set: LabelSet
    train: Dataset
    val: Dataset
    optimizer: object = None
    local_labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.local_labels = self.label_set.to_local(self.train.labels)

    @property
    def n_samples(self) -> int:
        return len(self.train)


@dataclass
class RoundUpdate:
    cid: int
    params: ParameterSet
    n_samples: int
    train_loss: float = float("nan")


@dataclass
class ServerState:
    params: ParameterSet
    label_sets: list[LabelSet]
    n_labels: int
    round: int = 0
    pool: np.ndarray | None = None


def client_rng(seed: int, cid: int, rnd: int) -> np.random.Generator:
    return np.random.default_rng([seed, _CLIENT, cid, rnd])


def init_server(net: Network, label_sets, n_labels: int, seed: int, pool=None) -> ServerState:
    params = net.init_params(n_labels, np.random.default_rng([seed, _INIT]))
    return ServerState(params, list(label_sets), n_labels, 0, pool)


def distribute(server: ServerState, k: int, label_mode: str = "private") -> ParameterSet:
    """Parameters sent to client ``k``: the full encoder and, in private mode, only its classifier rows."""
    if not 0 <= k < len(server.label_sets):
        raise UsageError(f"unknown client id {k}")
    params = server.params.copy()
    if label_mode == "private":
        rows = list(server.label_sets[k].global_labels)
        return params.with_classifier(params.classifier[rows].copy())
    return params


def fedrs_scale(label_set: LabelSet, n_labels: int, alpha: float) -> np.ndarray:
    scale = np.full(n_labels, float(alpha))
    scale[list(label_set.global_labels)] = 1.0
    return scale


def fedrs_restricted_softmax(logits: np.ndarray, label_set: LabelSet, alpha: float, label_mode: str = "public") -> np.ndarray:
    """Softmax after scaling the logits of classes outside ``label_set`` by ``alpha``."""
    if label_mode != "public":
        raise ConfigurationError(FEDRS_PRIVATE_MESSAGE)
    logits = np.atleast_2d(logits)
    return softmax(logits * fedrs_scale(label_set, logits.shape[1], alpha))


def fedprox_penalty(local: ParameterSet, anchor: ParameterSet, mu: float, label_mode: str) -> float:
    """Proximal term; classifier rows are compared only when label sets are public."""
    total = sum(float(np.sum((local.encoder[k] - anchor.encoder[k]) ** 2)) for k in local.encoder)
    if label_mode == "public":
        total += float(np.sum((local.classifier - anchor.classifier) ** 2))
    return 0.5 * mu * total


def fedprox_grad(local: ParameterSet, anchor: ParameterSet, mu: float, label_mode: str) -> ParameterSet:
    enc = {k: mu * (local.encoder[k] - anchor.encoder[k]) for k in local.encoder}
    if label_mode == "public":
        cls = mu * (local.classifier - anchor.classifier)
    else:
        cls = np.zeros_like(local.classifier)
    return ParameterSet(enc, cls)


def _add(a: ParameterSet, b: ParameterSet) -> ParameterSet:
    return ParameterSet({k: v + b.encoder[k] for k, v in a.encoder.items()}, a.classifier + b.classifier)


def local_train(net: Network, client: ClientState, params: ParameterSet, config: FederationConfig, rnd: int = 0, n_labels: int | None = None) -> RoundUpdate:
    """``local_epochs`` passes of mini-batch training on the client's data."""
    expected = len(client.label_set) if config.private else n_labels
    if expected is not None and params.n_labels != expected:
        raise ConfigurationError(f"client {client.cid} received {params.n_labels} classifier rows, expected {expected}")
    rng = client_rng(config.seed, client.cid, rnd)
    if client.optimizer is None:
        client.optimizer = make_optimizer("adam", config.lr)
    opt = client.optimizer
    labels = client.local_labels if config.private else client.train.labels
    scale = fedrs_scale(client.label_set, params.n_labels, config.fedrs_alpha) if config.method == "fedrs" else None
    prox = config.method == "fedprox" and config.fedprox_mu > 0
    anchor = params
    x = client.train.images
    n = len(x)
    losses, counts = [], []
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = net.loss_and_grad(params, x[idx], labels[idx], train=True, rng=rng, logit_scale=scale)
            if prox:
                loss += fedprox_penalty(params, anchor, config.fedprox_mu, config.label_mode)
                grads = _add(grads, fedprox_grad(params, anchor, config.fedprox_mu, config.label_mode))
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss on client {client.cid}, round {rnd}, batch starting at {start}")
            params = opt.step(params, grads)
            losses.append(loss)
            counts.append(len(idx))
    train_loss = float(np.average(losses, weights=counts)) if losses else float("nan")
    return RoundUpdate(client.cid, params, client.n_samples, train_loss)


def _weighted_sum(arrays, weights):
    acc = np.zeros_like(arrays[0])
    for arr, w in zip(arrays, weights):
        acc = acc + w * arr
    return acc


def encoder_weights(updates) -> np.ndarray:
    n = sum(u.n_samples for u in updates)
    return np.array([u.n_samples / n for u in updates])


def aggregate_public(updates) -> ParameterSet:
    """Sample-size weighted average of full parameter sets."""
    if not updates:
        raise UsageError("no client updates to aggregate")
    w = encoder_weights(updates)
    encoder = {k: _weighted_sum([u.params.encoder[k] for u in updates], w) for k in updates[0].params.encoder}
    return ParameterSet(encoder, _weighted_sum([u.params.classifier for u in updates], w))


def label_weights(updates, label_sets, n_labels: int) -> np.ndarray:
    """``W[i, y] = n_i / n'_y`` for clients holding ``y``; zero elsewhere."""
    held = np.zeros((len(updates), n_labels), dtype=bool)
    for i, ls in enumerate(label_sets):
        held[i, list(ls.global_labels)] = True
    n = np.array([u.n_samples for u in updates])
    n_prime = np.zeros(n_labels, dtype=np.int64)
    for i in range(len(updates)):
        n_prime = n_prime + held[i] * n[i]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(held, n[:, None] / np.where(n_prime > 0, n_prime, 1)[None, :], 0.0)


def aggregate_private(updates, label_sets, n_labels: int, previous: np.ndarray | None = None) -> ParameterSet:
    """Encoder averaged over all clients; classifier row ``y`` averaged over the clients holding ``y``.

    Rows no participating client holds keep their ``previous`` value.
    """
    if not updates:
        raise UsageError("no client updates to aggregate")
    for u, ls in zip(updates, label_sets):
        if sorted(ls.reverse_index.values()) != list(range(len(ls))):
            raise ConfigurationError(f"reverse index of client {u.cid} is not a bijection onto its rows")
        if u.params.n_labels != len(ls):
            raise ConfigurationError(f"client {u.cid} returned {u.params.n_labels} rows for {len(ls)} labels")
    w = encoder_weights(updates)
    encoder = {k: _weighted_sum([u.params.encoder[k] for u in updates], w) for k in updates[0].params.encoder}
    W = label_weights(updates, label_sets, n_labels)
    width = updates[0].params.classifier.shape[1]
    acc = np.zeros((n_labels, width), dtype=updates[0].params.classifier.dtype)
    for i, (u, ls) in enumerate(zip(updates, label_sets)):
        rows = list(ls.global_labels)
        acc[rows] = acc[rows] + W[i, rows][:, None] * u.params.classifier
    covered = W.sum(axis=0) > 0
    if previous is not None and not covered.all():
        acc[~covered] = previous[~covered]
    return ParameterSet(encoder, acc)


def client_predictions(net: Network, updates, clients, pool_x: np.ndarray, config: FederationConfig) -> list:
    """Each client's post-training probabilities on the pool, restricted to its own labels."""
    n = sum(u.n_samples for u in updates)
    preds = []
    for u, c in zip(updates, clients):
        probs = net.predict_proba(u.params, pool_x)
        if not config.private:
            probs = renormalize(probs, c.label_set.global_labels)
        preds.append(combiner.ClientPrediction(c.label_set, probs, u.n_samples / n, c.cid))
    return preds


def evaluate(net: Network, params: ParameterSet, clients, test: Dataset | None):
    correct = total = 0
    for c in clients:
        if len(c.val):
            correct += accuracy(net.predict_proba(params, c.val.images), c.val.labels) * len(c.val)
            total += len(c.val)
    val = correct / total if total else float("nan")
    test_acc = accuracy(net.predict_proba(params, test.images), test.labels) if test is not None and len(test) else float("nan")
    return val, test_acc


def run_round(net: Network, server: ServerState, clients, config: FederationConfig, test: Dataset | None = None):
    """distribute -> local training -> aggregation -> optional central tuning -> evaluation."""
    started = time.perf_counter()
    rnd = server.round
    updates = []
    for c in clients:
        params = distribute(server, c.cid, config.label_mode)
        updates.append(local_train(net, c, params, config, rnd, server.n_labels))
    if config.private:
        new = aggregate_private(updates, [c.label_set for c in clients], server.n_labels, server.params.classifier)
    else:
        new = aggregate_public(updates)
    tuning = None
    if config.tuning_loss is not None and server.pool is not None and len(server.pool):
        preds = client_predictions(net, updates, clients, server.pool, config)
        new, tuning = combiner.central_tune(
            net, new, server.pool, preds, config.tuning_loss,
            epochs=config.tuning_epochs, optimizer=config.tuning_optimizer, lr=config.lr,
            batch_size=config.batch_size, rng=np.random.default_rng([config.seed, _TUNE, rnd]),
        )
    if not new.is_finite():
        raise NumericalError(f"aggregated parameters are non-finite in round {rnd}")
    server.params = new
    server.round += 1
    val, test_acc = evaluate(net, new, clients, test)
    n = sum(u.n_samples for u in updates)
    train_loss = sum(u.train_loss * u.n_samples for u in updates) / n
    record = RoundRecord(rnd, float(train_loss), float(val), float(test_acc), tuning, time.perf_counter() - started)
    return server, record


def run_federation(net: Network, server: ServerState, clients, config: FederationConfig, test: Dataset | None = None, on_round=None) -> RunResult:
    result = RunResult(config.as_dict(), config.seed)
    for _ in range(config.rounds):
        server, record = run_round(net, server, clients, config, test)
        result.history.append(record)
        if on_round is not None:
            on_round(server, record)
    if result.history:
        result.finalize()
    return result


def build_clients(dataset: Dataset, plan) -> list[ClientState]:
    return [
        ClientState(k, ls, dataset.subset(tr), dataset.subset(va))
        for k, (ls, tr, va) in enumerate(zip(plan.label_sets, plan.train_indices, plan.val_indices))
    ]
