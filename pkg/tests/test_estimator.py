import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedlabels import FederatedLabelSetClassifier


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(0)
    centers = rng.standard_normal((4, 5)) * 4
    y = np.repeat(np.array(["a", "b", "c", "d"]), 300)
    codes = np.searchsorted(["a", "b", "c", "d"], y)
    X = centers[codes] + rng.standard_normal((len(y), 5))
    return X, y


def small(**kw):
    args = dict(n_clients=3, labels_per_client=2, samples_per_client=100, rounds=8, lr=1e-2, batch_size=32, hidden=(8,))
    return FederatedLabelSetClassifier(**(args | kw))


def test_fit_predict_transform(blobs):
    X, y = blobs
    clf = small().fit(X, y, eval_set=(X, y))
    assert list(clf.classes_) == ["a", "b", "c", "d"]
    assert clf.predict(X).dtype == y.dtype
    assert clf.predict_proba(X).shape == (len(X), 4)
    assert clf.transform(X).shape == (len(X), 8)
    assert clf.score(X, y) > 0.6  # chance is 0.25
    assert len(clf.history_) == 8 and 0 <= clf.best_round_ < 8
    assert all(set(s) <= set(clf.classes_) for s in clf.label_sets_)


def test_params_roundtrip_and_clone():
    clf = small(method="fedprox", fedprox_mu=0.5)
    assert clf.get_params()["fedprox_mu"] == 0.5
    copy = clone(clf)
    assert copy.get_params() == clf.get_params()
    copy.set_params(rounds=3)
    assert copy.rounds == 3 and clf.rounds == 8


def test_tuning_method_uses_pool(blobs):
    X, y = blobs
    clf = small(method="tune_mse", unlabeled_pool_size=100, rounds=2).fit(X, y)
    assert all(r.tuning_loss is not None for r in clf.history_)


def test_unfitted_raises(blobs):
    with pytest.raises(NotFittedError):
        small().predict(blobs[0])


def test_fit_is_deterministic(blobs):
    X, y = blobs
    a = small(rounds=3).fit(X, y).predict_proba(X)
    b = small(rounds=3).fit(X, y).predict_proba(X)
    np.testing.assert_array_equal(a, b)
