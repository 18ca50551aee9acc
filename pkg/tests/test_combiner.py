import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlabels.combiner import (
    ClientPrediction,
    central_tune,
    combine_fixed_x,
    grid_minimize,
    missing_label_gradient_sign,
    mse_loss,
    mse_loss_grad,
    pairwise_loss,
    pairwise_loss_grad,
    pairwise_variant_loss_grad,
    perfect_combination_check,
    project_simplex,
)
from fedlabels.data import LabelSet, SyntheticTask, renormalize
from fedlabels.exceptions import ConfigurationError
from fedlabels.nn import EncoderSpec, Network
from fedlabels.oracles import random_connected_task


def pred(labels, probs, w=1.0):
    return ClientPrediction(LabelSet(tuple(labels)), np.atleast_2d(probs), w)


def naive_pairwise(central, preds):
    total = 0.0
    for x in range(central.shape[0]):
        for p in preds:
            labels = p.label_set.global_labels
            a = p.probabilities[x]
            for i, j in itertools.combinations(range(len(labels)), 2):
                total += p.weight * (a[i] * central[x, labels[j]] - a[j] * central[x, labels[i]]) ** 2
    return total / central.shape[0]


def naive_mse(central, preds):
    total = 0.0
    for x in range(central.shape[0]):
        for p in preds:
            for i, y in enumerate(p.label_set.global_labels):
                total += p.weight * (p.probabilities[x, i] - central[x, y]) ** 2
    return total / central.shape[0]


def random_instance(rng, n_labels=6, m=3, batch=5):
    preds = []
    for _ in range(m):
        s = tuple(rng.choice(n_labels, int(rng.integers(1, n_labels + 1)), replace=False).tolist())
        preds.append(pred(s, rng.dirichlet(np.ones(len(s)), batch), float(rng.uniform(0.1, 1))))
    return rng.dirichlet(np.ones(n_labels), batch), preds


# -- loss values


def test_pairwise_hand_example():
    assert pairwise_loss(np.array([[0.3, 0.3, 0.4]]), [pred((0, 1), [1.0, 0.0])]) == pytest.approx(0.09, abs=1e-15)


def test_pairwise_zero_for_matching_ratio():
    assert pairwise_loss(np.array([[0.2, 0.2, 0.6]]), [pred((0, 1), [0.5, 0.5])]) == pytest.approx(0.0, abs=1e-15)


def test_mse_hand_example():
    assert mse_loss(np.array([[0.6, 0.4]]), [pred((0,), [1.0])]) == pytest.approx(0.16, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_match_naive_loops(seed):
    central, preds = random_instance(np.random.default_rng(seed))
    assert pairwise_loss(central, preds) == pytest.approx(naive_pairwise(central, preds), abs=1e-12)
    assert mse_loss(central, preds) == pytest.approx(naive_mse(central, preds), abs=1e-12)


@pytest.mark.parametrize("fn", [pairwise_loss_grad, mse_loss_grad])
def test_loss_gradient_finite_differences(fn):
    central, preds = random_instance(np.random.default_rng(1))
    _, grad = fn(central, preds)
    eps = 1e-6
    for idx in [(0, 0), (2, 3), (4, 5)]:
        up, down = central.copy(), central.copy()
        up[idx] += eps
        down[idx] -= eps
        assert (fn(up, preds)[0] - fn(down, preds)[0]) / (2 * eps) == pytest.approx(grad[idx], rel=1e-6, abs=1e-10)


def test_losses_invariant_to_client_order_and_label_permutation():
    rng = np.random.default_rng(2)
    central, preds = random_instance(rng)
    perm = rng.permutation(6)
    moved = np.empty_like(central)
    moved[:, perm] = central
    relabelled = [pred(perm[list(p.label_set.global_labels)], p.probabilities, p.weight) for p in preds]
    for loss in (pairwise_loss, mse_loss):
        base = loss(central, preds)
        assert loss(central, preds[::-1]) == pytest.approx(base, abs=1e-14)
        assert loss(moved, relabelled) == pytest.approx(base, abs=1e-14)


def test_losses_vanish_for_perfect_clients():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(5), 4)
    sets = [(0, 1, 2), (2, 3), (3, 4, 0)]
    preds = [pred(s, renormalize(p, s), 1 / 3) for s in sets]
    assert pairwise_loss(p, preds) < 1e-12
    mse_preds = [pred(s, p[:, list(s)], 1 / 3) for s in sets]
    assert mse_loss(p, mse_preds) < 1e-12


# -- fixed-input combination


def test_project_simplex():
    np.testing.assert_allclose(project_simplex(np.array([0.2, 0.3, 0.5])), [0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex(np.array([0.5, 0.5, 0.5])), [1 / 3] * 3)


def test_combine_three_labels_two_clients():
    preds = [pred((0, 1), [0.4, 0.6], 0.5), pred((1, 2), [0.375, 0.625], 0.5)]
    np.testing.assert_allclose(combine_fixed_x(preds, 3), [0.2, 0.3, 0.5], atol=1e-3)
    np.testing.assert_allclose(grid_minimize(preds, 3), [0.2, 0.3, 0.5], atol=0.02)


def test_combine_requires_coverage():
    with pytest.raises(ConfigurationError):
        combine_fixed_x([pred((0, 1), [0.5, 0.5])], 3)


def test_combine_one_hot_truth():
    p = np.array([0.0, 1.0, 0.0, 0.0])
    sets = [(0, 1), (1, 2, 3), (0, 3)]
    preds = []
    for s in sets:
        sub = p[list(s)]
        preds.append(pred(s, sub / sub.sum() if sub.sum() else np.full(len(s), 1 / len(s)), 1 / 3))
    np.testing.assert_allclose(combine_fixed_x(preds, 4, max_iter=5000, tol=1e-13), p, atol=1e-3)


def test_combine_matches_grid_search():
    rng = np.random.default_rng(11)
    for _ in range(10):
        _, preds, n_labels = random_connected_task(rng)
        np.testing.assert_allclose(combine_fixed_x(preds, n_labels), grid_minimize(preds, n_labels), atol=0.02)


def test_grid_minimizer_invariant_to_weight_scaling():
    rng = np.random.default_rng(4)
    _, preds, n_labels = random_connected_task(rng)
    scaled = [pred(p.label_set.global_labels, p.probabilities, 7.5 * p.weight) for p in preds]
    np.testing.assert_array_equal(grid_minimize(preds, n_labels), grid_minimize(scaled, n_labels))


def test_grid_search_size_limit():
    with pytest.raises(ConfigurationError):
        grid_minimize([pred(range(5), np.full(5, 0.2))], 5)


def test_perfect_combination_on_synthetic_tasks():
    full = SyntheticTask.make(4, 3, label_sets=[(0, 1, 2, 3)], rng=0)
    assert perfect_combination_check(full) < 1e-12
    task = SyntheticTask.make(5, 3, separation=2.0, label_sets=[(0, 1, 2), (2, 3), (3, 4, 0)], rng=1)
    assert perfect_combination_check(task) < 1e-3


def test_perfect_combination_coverage_error():
    task = SyntheticTask.make(4, 3, label_sets=[(0, 1), (1, 2)], rng=0)
    with pytest.raises(ConfigurationError):
        perfect_combination_check(task)


# -- central tuning


def tuning_setup(seed=0):
    rng = np.random.default_rng(seed)
    net = Network(EncoderSpec("mlp", (4,), (6,)))
    params = net.init_params(4, rng)
    pool = rng.standard_normal((200, 4))
    target = net.init_params(4, rng)
    p = net.predict_proba(params.with_classifier(target.classifier), pool)
    sets = [(0, 1), (1, 2, 3), (3, 0)]
    return net, params, pool, sets, p


@pytest.mark.parametrize("kind", ["pairwise", "mse"])
def test_central_tune_reduces_loss_and_freezes_encoder(kind):
    net, params, pool, sets, p = tuning_setup()
    preds = [pred(s, renormalize(p, s) if kind == "pairwise" else p[:, list(s)], 1 / 3) for s in sets]
    tuned, losses = central_tune(net, params, pool, preds, kind, epochs=20, lr=0.05, batch_size=32, rng=0)
    assert len(losses) == 21
    assert losses[-1] < losses[0]
    for k, v in params.encoder.items():
        assert np.array_equal(tuned.encoder[k], v)
    assert not np.array_equal(tuned.classifier, params.classifier)


@pytest.mark.parametrize("overrides", [dict(epochs=0), dict(lr=0.0)])
def test_central_tune_noop(overrides):
    net, params, pool, sets, p = tuning_setup()
    preds = [pred(s, renormalize(p, s), 1 / 3) for s in sets]
    args = dict(epochs=2, lr=0.05) | overrides
    tuned, losses = central_tune(net, params, pool, preds, "pairwise", rng=0, **args)
    np.testing.assert_array_equal(tuned.classifier, params.classifier)
    assert len(losses) == args["epochs"] + 1


def test_central_tune_rejects_empty_pool():
    net, params, _, sets, _ = tuning_setup()
    with pytest.raises(ConfigurationError):
        central_tune(net, params, np.zeros((0, 4)), [], "mse")


# -- central-set variant and the missing-label gradient


def test_missing_label_zero_probability_gives_zero_gradient():
    preds = [pred((0, 1), [0.3, 0.7])]
    assert missing_label_gradient_sign(np.array([0.5, 0.5, 0.0]), preds, 2) == 0.0


def test_missing_label_single_term_derivative():
    # one client holding only label 0 with probability 1: the only pair with label 2
    # contributes (h0 * p2)^2, whose derivative is 2 * h0^2 * p2
    p = np.array([0.6, 0.1, 0.3])
    g = missing_label_gradient_sign(p, [pred((0,), [1.0])], 2)
    assert g == pytest.approx(2 * 1.0 * 0.3, abs=1e-15)


def test_missing_label_requires_absent_label():
    with pytest.raises(ConfigurationError):
        missing_label_gradient_sign(np.array([0.5, 0.5]), [pred((0, 1), [0.5, 0.5])], 1)


def test_variant_matches_subset_loss_when_all_labels_held():
    rng = np.random.default_rng(5)
    preds = [pred(range(4), rng.dirichlet(np.ones(4)), 0.4), pred(range(4), rng.dirichlet(np.ones(4)), 0.6)]
    p = rng.dirichlet(np.ones(4))
    assert pairwise_variant_loss_grad(p, preds, 4)[0] == pytest.approx(pairwise_loss(p[None], preds), abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_missing_label_gradient_non_negative(seed):
    rng = np.random.default_rng(seed)
    n_labels = int(rng.integers(3, 8))
    missing = int(rng.integers(n_labels))
    others = [y for y in range(n_labels) if y != missing]
    preds = [pred(sorted(rng.choice(others, 2, replace=False).tolist()), rng.dirichlet(np.ones(2)), 0.5) for _ in range(2)]
    assert missing_label_gradient_sign(rng.dirichlet(np.ones(n_labels)), preds, missing) >= 0
