"""Property suites behind the ``oracle`` and ``gradcheck`` commands.

Each check returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import numpy as np

from . import combiner
from .combiner import ClientPrediction
from .data import LabelSet, SyntheticTask, renormalize
from .nn import EncoderSpec, Network, grad_check, numeric_grad_check, softmax


def restriction_identity(n_cases: int = 100, seed: int = 0):
    """Softmax over a subset of classifier rows equals the renormalised full softmax."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n_labels = int(rng.integers(2, 11))
        r = int(rng.integers(2, 9))
        x = rng.standard_normal((int(rng.integers(1, 9)), r))
        classifier = rng.standard_normal((n_labels, r + 1)) * rng.uniform(0.1, 5.0)
        size = int(rng.integers(1, n_labels + 1))
        subset = list(rng.choice(n_labels, size=size, replace=False))
        aug = np.hstack([x, np.ones((len(x), 1))])
        full = softmax(aug @ classifier.T)
        restricted = softmax(aug @ classifier[subset].T)
        worst = max(worst, float(np.max(np.abs(restricted - renormalize(full, subset)))))
    return "restriction identity", worst < 1e-9, f"max abs deviation {worst:.3e} over {n_cases} cases"


def three_label_example():
    p = np.array([0.2, 0.3, 0.5])
    preds = [
        ClientPrediction(LabelSet((0, 1)), [[0.4, 0.6]], 0.5),
        ClientPrediction(LabelSet((1, 2)), [[0.375, 0.625]], 0.5),
    ]
    h = combiner.combine_fixed_x(preds, 3)
    err = float(np.max(np.abs(h - p)))
    return "perfect combination (3 labels, 2 clients)", err < 1e-3, f"sup-norm error {err:.3e}"


def random_connected_task(rng, max_labels=4):
    """Subset-consistent perfect clients whose label sets cover and connect all labels."""
    while True:
        n_labels = int(rng.integers(2, max_labels + 1))
        m = int(rng.integers(1, 4))
        sets = [tuple(sorted(rng.choice(n_labels, size=int(rng.integers(2, n_labels + 1)), replace=False).tolist())) for _ in range(m)]
        if _connected(sets, n_labels):
            break
    p = rng.dirichlet(np.full(n_labels, 3.0))
    p = np.maximum(p, 0.05)
    p /= p.sum()
    w = rng.dirichlet(np.ones(m))
    preds = [ClientPrediction(LabelSet(s), renormalize(p, s)[None, :], float(wk)) for s, wk in zip(sets, w)]
    return p, preds, n_labels


def _connected(sets, n_labels):
    parent = list(range(n_labels))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    covered = set()
    for s in sets:
        covered.update(s)
        for a in s[1:]:
            parent[find(a)] = find(s[0])
    return len(covered) == n_labels and len({find(i) for i in range(n_labels)}) == 1


def grid_agreement(n_tasks: int = 20, seed: int = 0, resolution: float = 0.01):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_tasks):
        _, preds, n_labels = random_connected_task(rng)
        h = combiner.combine_fixed_x(preds, n_labels)
        g = combiner.grid_minimize(preds, n_labels, resolution)
        worst = max(worst, float(np.max(np.abs(h - g))))
    return "solver vs grid search", worst <= 2 * resolution, f"max deviation {worst:.4f} (bound {2 * resolution})"


def perfect_combination_synthetic():
    task = SyntheticTask.make(6, 5, separation=2.0, label_sets=[(0, 1, 2), (2, 3), (3, 4, 5), (1, 5)], rng=7)
    dev = combiner.perfect_combination_check(task)
    return "perfect combination (synthetic task)", dev < 1e-3, f"max deviation {dev:.3e}"


def missing_label_gradients(n_instances: int = 1000, seed: int = 0, eps: float = 1e-6):
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(n_instances):
        n_labels = int(rng.integers(3, 11))
        missing = int(rng.integers(n_labels))
        others = [y for y in range(n_labels) if y != missing]
        preds = []
        for _ in range(int(rng.integers(1, 5))):
            s = tuple(sorted(rng.choice(others, size=int(rng.integers(1, len(others) + 1)), replace=False).tolist()))
            preds.append(ClientPrediction(LabelSet(s), rng.dirichlet(np.ones(len(s)))[None, :], float(rng.uniform(0.1, 1))))
        p = rng.dirichlet(np.ones(n_labels))
        g = combiner.missing_label_gradient_sign(p, preds, missing)
        up, down = p.copy(), p.copy()
        up[missing] += eps
        down[missing] -= eps
        numeric = (combiner.pairwise_variant_loss_grad(up, preds, n_labels)[0] - combiner.pairwise_variant_loss_grad(down, preds, n_labels)[0]) / (2 * eps)
        if g >= 0 and np.sign(numeric) == np.sign(g):
            ok += 1
    return "missing-label gradient sign", ok == n_instances, f"{ok}/{n_instances} instances non-negative and sign-consistent"


def oracle_suite():
    return [restriction_identity(), three_label_example(), grid_agreement(), perfect_combination_synthetic(), missing_label_gradients()]


def gradcheck_suite(seed: int = 0):
    rng = np.random.default_rng(seed)
    results = []
    cases = [
        ("mlp", EncoderSpec("mlp", (12,), (16, 8)), rng.standard_normal((8, 12))),
        ("cnn", EncoderSpec("cnn", (1, 28, 28), fc_width=16), rng.random((4, 1, 28, 28))),
    ]
    for name, spec, x in cases:
        net = Network(spec)
        params = net.init_params(5, rng)
        y = rng.integers(0, 5, len(x))
        err = grad_check(net, params, x, y, seed=seed)
        results.append((f"cross-entropy gradient ({name})", err < 1e-4, f"max relative error {err:.3e}"))
        err = grad_check(net, params, x, y, seed=seed, include_encoder=False)
        results.append((f"cross-entropy gradient, classifier only ({name})", err < 1e-6, f"max relative error {err:.3e}"))
    net = Network(cases[0][1])
    params = net.init_params(5, rng)
    x = cases[0][2]
    sets = [LabelSet((0, 1, 2)), LabelSet((2, 3, 4)), LabelSet((1, 4))]
    preds = [ClientPrediction(s, rng.dirichlet(np.ones(len(s)), size=len(x)), 1 / 3) for s in sets]
    losses = {"pairwise": combiner.pairwise_loss, "mse": combiner.mse_loss}
    for kind, loss in losses.items():
        _, grads = combiner.tuning_loss_and_grad(net, params, x, preds, kind)

        def loss_fn(p, loss=loss):
            return loss(net.forward(p, x).probabilities, preds), None

        err, _ = numeric_grad_check(loss_fn, grads, params, include_encoder=False)
        results.append((f"{kind} tuning-loss gradient (classifier)", err < 1e-4, f"max relative error {err:.3e}"))
    return results
