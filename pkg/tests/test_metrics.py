import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlabels.exceptions import UsageError
from fedlabels.metrics import RoundRecord, RunResult, accuracy, bootstrap_ci, select_best_snapshot


def history(val, test):
    return [RoundRecord(i, 0.0, v, t) for i, (v, t) in enumerate(zip(val, test))]


def one_hot(labels, n):
    return np.eye(n)[labels]


def test_constant_prediction_accuracy():
    labels = np.array([2] * 3 + [0] * 7)
    assert accuracy(one_hot(np.full(10, 2), 3), labels) == pytest.approx(0.30)


def test_perfect_and_shuffled_accuracy():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, 100)
    probs = rng.dirichlet(np.ones(5), 100)
    assert accuracy(one_hot(labels, 5), labels) == 1.0
    perm = rng.permutation(100)
    assert accuracy(probs[perm], labels[perm]) == accuracy(probs, labels)


def test_argmax_tie_goes_to_lowest_label():
    assert accuracy(np.array([[0.5, 0.5]]), [0]) == 1.0


def test_random_model_accuracy_near_chance():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(10), 1000)
    assert abs(accuracy(rng.random((10_000, 10)), labels) - 0.1) < 0.01


def test_accuracy_rejects_empty():
    with pytest.raises(UsageError):
        accuracy(np.zeros((0, 3)), [])


def test_snapshot_examples():
    assert select_best_snapshot(history([0.5, 0.9, 0.7], [0.4, 0.8, 0.9])) == (1, 0.8)
    assert select_best_snapshot(history([0.1, 0.2, 0.3], [0.5, 0.6, 0.7])) == (2, 0.7)
    assert select_best_snapshot(history([0.6, 0.9, 0.9], [0.1, 0.2, 0.3])) == (1, 0.2)
    with pytest.raises(UsageError):
        select_best_snapshot([])


def test_snapshot_ignores_appended_worse_rounds():
    base = history([0.3, 0.8, 0.5], [0.1, 0.7, 0.2])
    extended = base + [RoundRecord(3 + i, 0.0, 0.79 - i * 0.1, 0.99) for i in range(3)]
    assert select_best_snapshot(extended) == select_best_snapshot(base)


def test_run_result_finalize():
    result = RunResult({}, 0, history([0.2, 0.4], [0.3, 0.6])).finalize()
    assert (result.best_round, result.best_test_accuracy) == (1, 0.6)


def test_bootstrap_constant_and_single():
    assert bootstrap_ci([0.8] * 10) == (0.8, 0.8, 0.8)
    assert bootstrap_ci([0.42]) == (0.42, 0.42, 0.42)


def test_bootstrap_narrows_with_more_data():
    rng = np.random.default_rng(2)
    small = rng.integers(0, 2, 10)
    large = rng.integers(0, 2, 100)
    lo_s, hi_s, m_s = bootstrap_ci(small)
    lo_l, hi_l, m_l = bootstrap_ci(large)
    assert lo_s <= m_s <= hi_s and lo_l <= m_l <= hi_l
    assert hi_l - lo_l < hi_s - lo_s


def test_bootstrap_is_deterministic():
    values = [0.1, 0.5, 0.7, 0.2]
    assert bootstrap_ci(values, rng=3) == bootstrap_ci(values, rng=3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=15))
def test_bootstrap_brackets_mean(values):
    low, high, mean = bootstrap_ci(values, n_boot=500)
    assert low <= mean <= high
