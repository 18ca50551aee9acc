import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlabels.exceptions import ConfigurationError, NumericalError, UsageError
from fedlabels.nn import (
    SGD,
    Adam,
    EncoderSpec,
    Network,
    ParameterSet,
    cross_entropy,
    grad_check,
    softmax,
)

MLP = EncoderSpec("mlp", (6,), (8, 4))
CNN = EncoderSpec("cnn", (1, 12, 12), fc_width=8)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_zero_classifier_gives_uniform(rng):
    net = Network(MLP)
    params = net.init_params(5, rng)
    params = params.with_classifier(np.zeros_like(params.classifier))
    probs = net.forward(params, rng.standard_normal((3, 6))).probabilities
    np.testing.assert_allclose(probs, 0.2, atol=1e-15)


def test_softmax_reference_values():
    # mpmath, 30 digits
    expected = [0.0900305731703805, 0.244728471054798, 0.665240955774822]
    np.testing.assert_allclose(softmax(np.array([[1.0, 2.0, 3.0]]))[0], expected, rtol=1e-12)


def test_single_label_model_is_certain(rng):
    net = Network(MLP)
    probs = net.forward(net.init_params(1, rng), rng.standard_normal((4, 6))).probabilities
    assert np.all(probs == 1.0)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 12),
    st.floats(-50, 50),
    st.integers(0, 2**31 - 1),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(n_classes, shift, seed):
    logits = np.random.default_rng(seed).standard_normal((5, n_classes)) * 10
    p = softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(softmax(logits + shift), p, atol=1e-9)


@pytest.mark.parametrize("spec", [MLP, CNN], ids=["mlp", "cnn"])
def test_forward_rows_on_simplex(spec, rng):
    net = Network(spec)
    params = net.init_params(7, rng)
    x = rng.random((5, *spec.input_shape))
    fwd = net.forward(params, x)
    assert fwd.representations.shape == (5, spec.representation_size)
    np.testing.assert_allclose(fwd.probabilities.sum(axis=1), 1.0, atol=1e-9)


def test_forward_rejects_bad_shape(rng):
    net = Network(MLP)
    with pytest.raises(ConfigurationError):
        net.forward(net.init_params(3, rng), np.zeros((2, 5)))


def test_non_finite_activation_names_layer(rng):
    net = Network(MLP)
    params = net.init_params(3, rng)
    params.encoder["fc0.W"][0, 0] = np.inf
    with pytest.raises(NumericalError, match="fc0"):
        net.forward(params, np.ones((1, 6)))


def test_dropout_is_deterministic_given_rng(rng):
    net = Network(CNN)
    params = net.init_params(3, rng)
    x = rng.random((2, 1, 12, 12))
    a = net.forward(params, x, train=True, rng=np.random.default_rng(1)).probabilities
    b = net.forward(params, x, train=True, rng=np.random.default_rng(1)).probabilities
    c = net.forward(params, x, train=False).probabilities
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


@pytest.mark.parametrize(
    "probs, labels, expected",
    [
        ([[1.0, 0.0]], [0], 0.0),
        ([[0.25] * 4], [2], np.log(4)),
        ([[0.5, 0.5]], [0], 0.693147180559945),
    ],
)
def test_cross_entropy_values(probs, labels, expected):
    assert cross_entropy(np.array(probs), np.array(labels)) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_rejects_bad_index():
    with pytest.raises(UsageError):
        cross_entropy(np.array([[0.5, 0.5]]), np.array([2]))


def test_backward_without_forward(rng):
    net = Network(MLP)
    params = net.init_params(3, rng)
    with pytest.raises(UsageError):
        net.backward(params, np.zeros((1, 3)))


def test_duplicated_sample_gradient_equals_single(rng):
    net = Network(MLP)
    params = net.init_params(3, rng)
    x = rng.standard_normal((1, 6))
    _, g1 = net.loss_and_grad(params, x, np.array([1]))
    _, g2 = net.loss_and_grad(params, np.vstack([x, x]), np.array([1, 1]))
    for (k, a), (_, b) in zip(g1.items(), g2.items()):
        np.testing.assert_allclose(a, b, atol=1e-14, err_msg=k)


def test_converged_separable_singleton_has_tiny_gradient(rng):
    net = Network(EncoderSpec("mlp", (2,), (4,)))
    params = net.init_params(2, rng)
    x, y = np.array([[1.0, -1.0]]), np.array([0])
    opt = Adam(lr=0.1)
    for _ in range(6000):
        _, g = net.loss_and_grad(params, x, y)
        params = opt.step(params, g)
    _, g = net.loss_and_grad(params, x, y)
    norm = np.sqrt(sum(float(np.sum(v**2)) for _, v in g.items()))
    assert norm < 1e-6


@pytest.mark.parametrize(
    "spec, batch",
    [(EncoderSpec("mlp", (10,), (16, 8)), 8), (EncoderSpec("cnn", (1, 28, 28), fc_width=16), 4), (EncoderSpec("cnn", (3, 32, 32), fc_width=16), 4)],
    ids=["mlp", "cnn-fmnist", "cnn-cifar"],
)
def test_grad_check(spec, batch, rng):
    net = Network(spec)
    params = net.init_params(5, rng)
    x = rng.random((batch, *spec.input_shape))
    y = rng.integers(0, 5, batch)
    assert grad_check(net, params, x, y) < 1e-4
    assert grad_check(net, params, x, y, include_encoder=False) < 1e-6


def test_grad_check_requires_float64(rng):
    net = Network(MLP, dtype=np.float32)
    params = net.init_params(3, rng)
    with pytest.raises(ConfigurationError):
        grad_check(net, params, np.zeros((1, 6), np.float32), np.array([0]))


def _scalar(v):
    return ParameterSet({"w": np.array([v])}, np.zeros((1, 1)))


def test_sgd_step():
    out = SGD(lr=0.1).step(_scalar(1.0), _scalar(0.5))
    assert out.encoder["w"][0] == pytest.approx(0.95)


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adam_first_step_magnitude_is_lr(g):
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    opt = Adam(lr=1e-3)
    out = opt.step(_scalar(1.0), _scalar(g))
    delta = out.encoder["w"][0] - 1.0
    assert delta == pytest.approx(-np.sign(g) * 1e-3 * abs(g) / (abs(g) + 1e-8), rel=1e-12)


def test_adam_zero_gradient_keeps_params_and_counts():
    opt = Adam()
    out = opt.step(_scalar(1.0), _scalar(0.0))
    assert out.encoder["w"][0] == 1.0
    assert opt.t == 1


def test_optimizer_refuses_non_finite():
    with pytest.raises(NumericalError):
        Adam().step(_scalar(1.0), _scalar(np.nan))


def test_optimizer_checks_shapes():
    bad = ParameterSet({"w": np.zeros(2)}, np.zeros((1, 1)))
    with pytest.raises(ConfigurationError):
        SGD().step(_scalar(1.0), bad)
