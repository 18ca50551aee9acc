"""Combining subset classifiers into one classifier over the full label set.

The pairwise criterion for one client with restricted probabilities ``a`` and
central probabilities ``h`` (both over the client's labels) sums
``(a[j] h[i] - a[i] h[j])**2`` over unordered pairs ``i < j``. By Lagrange's
identity this equals ``|a|^2 |h|^2 - (a . h)^2``, which is what the
vectorised code evaluates.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .data import LabelSet, SyntheticTask, renormalize
from .exceptions import ConfigurationError
from .nn import Network, ParameterSet, make_optimizer, softmax

log = logging.getLogger(__name__)

LOSS_KINDS = ("pairwise", "mse")


@dataclass
class ClientPrediction:
    """Client ``k``'s probabilities over its own labels for a batch of inputs."""

    label_set: LabelSet
    probabilities: np.ndarray  # (N, |Y_k|)
    weight: float
    client: int = -1

    def __post_init__(self):
        self.probabilities = np.atleast_2d(np.asarray(self.probabilities, dtype=np.float64))
        if self.probabilities.shape[1] != len(self.label_set):
            raise ConfigurationError("prediction width does not match the client's label set")

    def rows(self, idx) -> ClientPrediction:
        return ClientPrediction(self.label_set, self.probabilities[idx], self.weight, self.client)


def check_coverage(predictions, n_labels: int):
    covered = set()
    for pred in predictions:
        covered.update(pred.label_set.global_labels)
    missing = sorted(set(range(n_labels)) - covered)
    if missing:
        raise ConfigurationError(f"labels {missing} are not covered by any client")


# --------------------------------------------------------------------------
# tuning losses over a batch


def pairwise_loss_grad(central: np.ndarray, predictions) -> tuple[float, np.ndarray]:
    """Batch-mean pairwise loss and its gradient w.r.t. the central probabilities."""
    central = np.atleast_2d(central)
    n = central.shape[0]
    loss = 0.0
    grad = np.zeros_like(central)
    for pred in predictions:
        cols = list(pred.label_set.global_labels)
        a = pred.probabilities
        h = central[:, cols]
        aa = np.sum(a * a, axis=1, keepdims=True)
        ah = np.sum(a * h, axis=1, keepdims=True)
        loss += pred.weight * float(np.sum(aa[:, 0] * np.sum(h * h, axis=1) - ah[:, 0] ** 2))
        grad[:, cols] += pred.weight * 2.0 * (aa * h - ah * a)
    return loss / n, grad / n


def mse_loss_grad(central: np.ndarray, predictions) -> tuple[float, np.ndarray]:
    """Batch-mean squared difference over each client's labels and its gradient."""
    central = np.atleast_2d(central)
    n = central.shape[0]
    loss = 0.0
    grad = np.zeros_like(central)
    for pred in predictions:
        cols = list(pred.label_set.global_labels)
        diff = central[:, cols] - pred.probabilities
        loss += pred.weight * float(np.sum(diff * diff))
        grad[:, cols] += pred.weight * 2.0 * diff
    return loss / n, grad / n


def pairwise_loss(central, predictions) -> float:
    return pairwise_loss_grad(central, predictions)[0]


def mse_loss(central, predictions) -> float:
    return mse_loss_grad(central, predictions)[0]


_LOSS_GRADS = {"pairwise": pairwise_loss_grad, "mse": mse_loss_grad}


def _loss_grad_fn(kind):
    try:
        return _LOSS_GRADS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown tuning loss {kind!r}; expected one of {LOSS_KINDS}") from None


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


def classifier_loss_grad(augmented: np.ndarray, classifier: np.ndarray, predictions, kind: str):
    """Tuning loss for a linear-softmax head on fixed representations.

    ``augmented`` holds representations with a trailing ones column.
    Returns ``(loss, d_loss/d_classifier)``.
    """
    probs = softmax(augmented @ classifier.T)
    loss, dprobs = _loss_grad_fn(kind)(probs, predictions)
    return loss, softmax_backward(probs, dprobs).T @ augmented


def tuning_loss_and_grad(net: Network, params: ParameterSet, x: np.ndarray, predictions, kind: str):
    """Tuning loss of the central model on ``x`` and its gradient (classifier only)."""
    fwd = net.forward(params, x, train=False)
    loss, dprobs = _loss_grad_fn(kind)(fwd.probabilities, predictions)
    grads = net.backward(params, softmax_backward(fwd.probabilities, dprobs), encoder=False)
    return loss, grads


def _augment(reps):
    return np.hstack([reps, np.ones((reps.shape[0], 1), dtype=reps.dtype)])


def pool_loss(augmented, classifier, predictions, kind) -> float:
    probs = softmax(augmented @ classifier.T)
    return _loss_grad_fn(kind)(probs, predictions)[0]


def central_tune(
    net: Network,
    params: ParameterSet,
    pool_x: np.ndarray,
    predictions,
    kind: str,
    epochs: int = 3,
    optimizer: str = "adam",
    lr: float = 1e-3,
    batch_size: int = 64,
    rng=None,
) -> tuple[ParameterSet, list[float]]:
    """Fit the server classifier to the clients' pool predictions; the encoder stays frozen.

    ``predictions`` hold each client's probabilities on the whole pool.
    Returns the tuned parameters and the pool loss before tuning and after each
    epoch. A run that ends non-finite, or more than 1% above its starting
    loss, is discarded and the untuned parameters are returned.
    """
    if len(pool_x) == 0:
        raise ConfigurationError("central tuning needs a non-empty unlabeled pool")
    _loss_grad_fn(kind)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    augmented = _augment(net.encode(params, pool_x))
    classifier = params.classifier
    losses = [pool_loss(augmented, classifier, predictions, kind)]
    opt = make_optimizer(optimizer, lr)
    head = ParameterSet({}, classifier)
    n = len(pool_x)
    try:
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                batch = [p.rows(idx) for p in predictions]
                loss, grad = classifier_loss_grad(augmented[idx], head.classifier, batch, kind)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite tuning loss")
                head = opt.step(head, ParameterSet({}, grad))
            losses.append(pool_loss(augmented, head.classifier, predictions, kind))
    except (FloatingPointError, ArithmeticError) as exc:
        log.warning("central tuning aborted (%s); keeping the untuned aggregate", exc)
        return params, losses
    if not np.isfinite(losses[-1]) or losses[-1] > 1.01 * losses[0] + 1e-15:
        log.warning("central tuning raised the pool loss from %.6g to %.6g; keeping the untuned aggregate", losses[0], losses[-1])
        return params, losses
    return params.with_classifier(head.classifier), losses


# --------------------------------------------------------------------------
# fixed-input combination


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.count_nonzero(u - css / k > 0)
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def pairwise_quadratic(predictions, n_labels: int) -> np.ndarray:
    """Matrix ``Q`` with pairwise objective ``h @ Q @ h`` for single-input predictions."""
    Q = np.zeros((n_labels, n_labels))
    for pred in predictions:
        cols = np.asarray(pred.label_set.global_labels)
        a = pred.probabilities[0]
        Q[np.ix_(cols, cols)] += pred.weight * (np.dot(a, a) * np.eye(len(cols)) - np.outer(a, a))
    return Q


def combine_fixed_x(predictions, n_labels: int, max_iter: int = 500, step: float | None = None, tol: float = 1e-8) -> np.ndarray:
    """Minimise the pairwise objective over the simplex for a single input.

    Projected gradient descent from the uniform point. ``step`` defaults to
    ``1 / L`` with ``L`` the largest eigenvalue of the objective's Hessian.
    Iteration stops once an update moves less than ``tol`` (max norm); the
    result is then refined by an exact solve on its support.
    """
    check_coverage(predictions, n_labels)
    Q = pairwise_quadratic(predictions, n_labels)
    if step is None:
        lipschitz = 2.0 * float(np.linalg.eigvalsh(Q)[-1])
        step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    h = np.full(n_labels, 1.0 / n_labels)
    for _ in range(max_iter):
        new = project_simplex(h - step * 2.0 * (Q @ h))
        done = np.max(np.abs(new - h)) < tol
        h = new
        if done:
            break
    return _polish(Q, h)


def _polish(Q: np.ndarray, h: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Solve the equality-constrained problem on the support of ``h`` exactly.

    Gradient steps crawl when ``Q`` is badly conditioned (labels linking the
    clients carry tiny probability). The KKT solution on the support is kept
    only if it is feasible and not worse.
    """
    support = np.flatnonzero(h > floor)
    s = len(support)
    if s < 2:
        return h
    kkt = np.zeros((s + 1, s + 1))
    kkt[:s, :s] = 2.0 * Q[np.ix_(support, support)]
    kkt[:s, s] = kkt[s, :s] = 1.0
    rhs = np.zeros(s + 1)
    rhs[s] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:s]
    if not np.all(np.isfinite(sol)) or sol.min() < -1e-12:
        return h
    cand = np.zeros_like(h)
    cand[support] = np.maximum(sol, 0.0)
    cand /= cand.sum()
    return cand if cand @ Q @ cand <= h @ Q @ h else h


def pairwise_objective_at(h: np.ndarray, predictions) -> np.ndarray:
    """Pairwise objective at one input for candidate rows ``h`` (G, |Y|), summed pair by pair."""
    h = np.atleast_2d(h)
    total = np.zeros(h.shape[0])
    for pred in predictions:
        a = pred.probabilities[0]
        labels = pred.label_set.global_labels
        for i, j in itertools.combinations(range(len(labels)), 2):
            total += pred.weight * (a[i] * h[:, labels[j]] - a[j] * h[:, labels[i]]) ** 2
    return total


def simplex_grid(n_labels: int, resolution: float = 0.01) -> np.ndarray:
    steps = int(round(1.0 / resolution))
    points = [c for c in itertools.product(range(steps + 1), repeat=n_labels - 1) if sum(c) <= steps]
    arr = np.array(points, dtype=np.int64).reshape(-1, n_labels - 1)
    return np.hstack([arr, steps - arr.sum(axis=1, keepdims=True)]) / steps


def grid_minimize(predictions, n_labels: int, resolution: float = 0.01) -> np.ndarray:
    """Exhaustive grid search over the simplex; for small label sets only."""
    if n_labels > 4:
        raise ConfigurationError("grid search is limited to at most 4 labels")
    grid = simplex_grid(n_labels, resolution)
    return grid[int(np.argmin(pairwise_objective_at(grid, predictions)))]


def perfect_combination_check(task: SyntheticTask, inputs: np.ndarray | None = None, weights=None, n_inputs: int = 25, rng=0) -> float:
    """Max sup-norm distance between the combination of exact client conditionals and the truth.

    ``inputs`` defaults to the mixture centres plus ``n_inputs`` random draws.
    """
    n_labels = task.n_classes
    m = len(task.label_sets)
    check_coverage([ClientPrediction(ls, np.ones((1, len(ls))) / len(ls), 1.0) for ls in task.label_sets], n_labels)
    if inputs is None:
        inputs = np.vstack([task.means, task.sample_inputs(n_inputs, rng)])
    weights = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    truth = task.conditional(inputs)
    worst = 0.0
    for x, p in zip(inputs, truth):
        preds = [
            ClientPrediction(ls, renormalize(p, ls.global_labels)[None, :], float(w), k)
            for k, (ls, w) in enumerate(zip(task.label_sets, weights))
        ]
        h = combine_fixed_x(preds, n_labels, max_iter=20_000, tol=1e-13)
        worst = max(worst, float(np.max(np.abs(h - p))))
    return worst


# --------------------------------------------------------------------------
# pairwise terms over the central label set (missing-label analysis)


def pairwise_variant_loss_grad(central: np.ndarray, predictions, n_labels: int) -> tuple[float, np.ndarray]:
    """Pairwise loss with pairs drawn from the full central label set.

    Client probabilities are zero-padded outside the client's labels, so a
    label no client holds still enters every client's terms. ``central`` is a
    single probability vector treated as free variables.
    """
    p = np.asarray(central, dtype=np.float64)
    loss = 0.0
    grad = np.zeros_like(p)
    for pred in predictions:
        a = np.zeros(n_labels)
        a[list(pred.label_set.global_labels)] = pred.probabilities[0]
        aa, ap = a @ a, a @ p
        loss += pred.weight * (aa * (p @ p) - ap**2)
        grad += pred.weight * 2.0 * (aa * p - ap * a)
    return float(loss), grad


def missing_label_gradient_sign(central: np.ndarray, predictions, missing_label: int) -> float:
    """Derivative of the central-set pairwise loss w.r.t. the probability of a label no client holds."""
    n_labels = len(central)
    for pred in predictions:
        if missing_label in pred.label_set:
            raise ConfigurationError(f"label {missing_label} is held by a client")
    return float(pairwise_variant_loss_grad(central, predictions, n_labels)[1][missing_label])
