"""Small numpy network stack: encoders, a linear-softmax head, losses and optimizers.

Only the two fixed encoder families used by the simulator are supported, an
MLP and a compact CNN. Gradients are written out by hand per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, NumericalError, UsageError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of the feature extractor.

    ``kind="mlp"`` stacks dense + ReLU layers with widths ``hidden``; the last
    width is the representation size. ``kind="cnn"`` is conv, conv, pool,
    conv, conv, pool, flatten, dense, dropout with ``channels`` filters of
    size 3x3 (stride 1, same padding) and a dense layer of ``fc_width`` units.
    """

    kind: str
    input_shape: tuple[int, ...]
    hidden: tuple[int, ...] = (64, 32)
    channels: int = 3
    fc_width: int = 64
    dropout: float = 0.5

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise ConfigurationError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "mlp" and (len(self.input_shape) != 1 or not self.hidden):
            raise ConfigurationError("mlp encoder needs a flat input shape and at least one hidden width")
        if self.kind == "cnn" and len(self.input_shape) != 3:
            raise ConfigurationError("cnn encoder needs an input shape (channels, height, width)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")

    @property
    def representation_size(self) -> int:
        return self.hidden[-1] if self.kind == "mlp" else self.fc_width


@dataclass(frozen=True)
class ParameterSet:
    """Encoder parameters plus one classifier row per label.

    ``classifier`` has shape ``(n_labels, r + 1)``; the last column is the
    per-label bias. Instances are treated as immutable values.
    """

    encoder: dict[str, np.ndarray]
    classifier: np.ndarray

    @property
    def n_labels(self) -> int:
        return self.classifier.shape[0]

    def copy(self) -> ParameterSet:
        return ParameterSet({k: v.copy() for k, v in self.encoder.items()}, self.classifier.copy())

    def with_classifier(self, classifier: np.ndarray) -> ParameterSet:
        return ParameterSet(self.encoder, classifier)

    def items(self):
        yield from self.encoder.items()
        yield "classifier", self.classifier

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    def n_parameters(self) -> int:
        return sum(v.size for _, v in self.items())


# --------------------------------------------------------------------------
# layers


class Dense:
    def __init__(self, name, n_in, n_out):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def init(self, rng, dtype):
        scale = np.sqrt(2.0 / self.n_in)
        return {
            f"{self.name}.W": (rng.standard_normal((self.n_in, self.n_out)) * scale).astype(dtype),
            f"{self.name}.b": np.zeros(self.n_out, dtype=dtype),
        }

    def forward(self, p, x, train, rng):
        return x @ p[f"{self.name}.W"] + p[f"{self.name}.b"], x

    def backward(self, p, dout, x):
        grads = {f"{self.name}.W": x.T @ dout, f"{self.name}.b": dout.sum(axis=0)}
        return dout @ p[f"{self.name}.W"].T, grads


class ReLU:
    def __init__(self, name):
        self.name = name

    def init(self, rng, dtype):
        return {}

    def forward(self, p, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, dout, mask):
        return dout * mask, {}


class Conv2d:
    """3x3 convolution, stride 1, zero padding 1."""

    def __init__(self, name, c_in, c_out):
        self.name, self.c_in, self.c_out = name, c_in, c_out

    def init(self, rng, dtype):
        scale = np.sqrt(2.0 / (self.c_in * 9))
        return {
            f"{self.name}.W": (rng.standard_normal((self.c_out, self.c_in, 3, 3)) * scale).astype(dtype),
            f"{self.name}.b": np.zeros(self.c_out, dtype=dtype),
        }

    def forward(self, p, x, train, rng):
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # windows: (N, C, H, W, 3, 3)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
        out = np.einsum("nchwij,fcij->nfhw", windows, p[f"{self.name}.W"], optimize=True)
        out += p[f"{self.name}.b"][None, :, None, None]
        return out, (x.shape, windows)

    def backward(self, p, dout, cache):
        shape, windows = cache
        W = p[f"{self.name}.W"]
        grads = {
            f"{self.name}.W": np.einsum("nchwij,nfhw->fcij", windows, dout, optimize=True),
            f"{self.name}.b": dout.sum(axis=(0, 2, 3)),
        }
        n, c, h, w = shape
        dpad = np.zeros((n, c, h + 2, w + 2), dtype=dout.dtype)
        for i in range(3):
            for j in range(3):
                dpad[:, :, i : i + h, j : j + w] += np.einsum("nfhw,fc->nchw", dout, W[:, :, i, j], optimize=True)
        return dpad[:, :, 1:-1, 1:-1], grads


class MaxPool2d:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def __init__(self, name):
        self.name = name

    def init(self, rng, dtype):
        return {}

    def forward(self, p, x, train, rng):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, p, dout, cache):
        (n, c, h, w), arg = cache
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        dx[:, :, : 2 * h2, : 2 * w2] = blocks
        return dx, {}


class Flatten:
    def __init__(self, name):
        self.name = name

    def init(self, rng, dtype):
        return {}

    def forward(self, p, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, dout, shape):
        return dout.reshape(shape), {}


class Dropout:
    """Inverted dropout; identity outside training mode."""

    def __init__(self, name, rate):
        self.name, self.rate = name, rate

    def init(self, rng, dtype):
        return {}

    def forward(self, p, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise UsageError("dropout in training mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, p, dout, mask):
        return (dout if mask is None else dout * mask), {}


def build_layers(spec: EncoderSpec) -> list:
    layers: list = []
    if spec.kind == "mlp":
        n_in = spec.input_shape[0]
        for i, width in enumerate(spec.hidden):
            layers += [Dense(f"fc{i}", n_in, width), ReLU(f"relu{i}")]
            n_in = width
        return layers
    c, h, w = spec.input_shape
    f = spec.channels
    layers = [
        Conv2d("conv0", c, f), ReLU("relu0"),
        Conv2d("conv1", f, f), ReLU("relu1"),
        MaxPool2d("pool0"),
        Conv2d("conv2", f, f), ReLU("relu2"),
        Conv2d("conv3", f, f), ReLU("relu3"),
        MaxPool2d("pool1"),
        Flatten("flatten"),
    ]
    flat = f * ((h // 2) // 2) * ((w // 2) // 2)
    layers += [Dense("fc", flat, spec.fc_width), ReLU("relu_fc"), Dropout("dropout", spec.dropout)]
    return layers


# --------------------------------------------------------------------------
# softmax and losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of ``labels`` (local row indices)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise UsageError(
            f"label index out of range for {probs.shape[1]} classifier rows; reverse index map is inconsistent"
        )
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the softmax logits."""
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return d / len(labels)


@dataclass
class Forward:
    representations: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray


@dataclass
class _Context:
    caches: list
    augmented: np.ndarray  # representations with a trailing ones column
    params_id: int


class Network:
    """Encoder + linear-softmax classifier evaluated on explicit ``ParameterSet`` values."""

    def __init__(self, spec: EncoderSpec, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers = build_layers(spec)
        self._ctx: _Context | None = None

    def init_params(self, n_labels: int, rng: np.random.Generator) -> ParameterSet:
        encoder: dict[str, np.ndarray] = {}
        for layer in self.layers:
            encoder.update(layer.init(rng, self.dtype))
        r = self.spec.representation_size
        classifier = (rng.standard_normal((n_labels, r + 1)) * np.sqrt(1.0 / r)).astype(self.dtype)
        classifier[:, -1] = 0.0
        return ParameterSet(encoder, classifier)

    def _check_input(self, params, x):
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ConfigurationError(f"batch shape {x.shape[1:]} does not match encoder input {self.spec.input_shape}")
        if params.classifier.shape[1] != self.spec.representation_size + 1:
            raise ConfigurationError(
                f"classifier width {params.classifier.shape[1]} != representation size {self.spec.representation_size} + 1"
            )

    def encode(self, params: ParameterSet, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """Representations only; leaves no backward context."""
        self._check_input(params, x)
        h = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            h, _ = layer.forward(params.encoder, h, train, rng)
        return h

    def forward(self, params: ParameterSet, x: np.ndarray, train: bool = False, rng=None, logit_scale=None) -> Forward:
        """Full forward pass; remembers intermediates for a following ``backward``.

        ``logit_scale`` multiplies each logit column before the softmax.
        """
        self._check_input(params, x)
        h = np.asarray(x, dtype=self.dtype)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(params.encoder, h, train, rng)
            if not np.all(np.isfinite(h)):
                raise NumericalError(f"non-finite activation in layer {layer.name}")
            caches.append(cache)
        augmented = np.hstack([h, np.ones((h.shape[0], 1), dtype=h.dtype)])
        logits = augmented @ params.classifier.T
        if logit_scale is not None:
            logits = logits * logit_scale
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite activation in layer classifier")
        self._ctx = _Context(caches, augmented, id(params))
        return Forward(h, logits, softmax(logits))

    def backward(self, params: ParameterSet, dlogits: np.ndarray, encoder: bool = True, logit_scale=None) -> ParameterSet:
        """Gradients for a loss whose derivative w.r.t. the (scaled) logits is ``dlogits``.

        With ``encoder=False`` the returned encoder dict is empty and the
        encoder backward pass is skipped.
        """
        ctx = self._ctx
        if ctx is None:
            raise UsageError("backward called without a preceding forward pass")
        self._ctx = None
        if logit_scale is not None:
            dlogits = dlogits * logit_scale
        d_classifier = dlogits.T @ ctx.augmented
        grads: dict[str, np.ndarray] = {}
        if encoder:
            dh = dlogits @ params.classifier[:, :-1]
            for layer, cache in zip(reversed(self.layers), reversed(ctx.caches)):
                dh, g = layer.backward(params.encoder, dh, cache)
                grads.update(g)
        out = ParameterSet(grads, d_classifier)
        if not out.is_finite():
            raise NumericalError("non-finite gradient")
        return out

    def activation_pattern(self) -> list:
        """ReLU masks and pooling argmaxes of the last forward pass."""
        if self._ctx is None:
            raise UsageError("no forward pass to read an activation pattern from")
        pattern = []
        for layer, cache in zip(self.layers, self._ctx.caches):
            if isinstance(layer, ReLU):
                pattern.append(cache)
            elif isinstance(layer, MaxPool2d):
                pattern.append(cache[1])
        return pattern

    def loss_and_grad(self, params, x, labels, train=False, rng=None, logit_scale=None):
        """Mean cross-entropy and its gradient for one mini-batch."""
        fwd = self.forward(params, x, train=train, rng=rng, logit_scale=logit_scale)
        loss = cross_entropy(fwd.probabilities, labels)
        grads = self.backward(params, cross_entropy_grad(fwd.probabilities, labels), logit_scale=logit_scale)
        return loss, grads

    def predict_proba(self, params: ParameterSet, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = []
        for start in range(0, len(x), batch_size):
            h = self.encode(params, x[start : start + batch_size])
            out.append(softmax(h @ params.classifier[:, :-1].T + params.classifier[:, -1]))
        if not out:
            return np.zeros((0, params.n_labels), dtype=self.dtype)
        return np.vstack(out)


# --------------------------------------------------------------------------
# optimizers


class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.t = 0

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        _check_grads(params, grads)
        self.t += 1
        encoder = dict(params.encoder)
        for k, g in grads.encoder.items():
            encoder[k] = params.encoder[k] - self.lr * g
        classifier = params.classifier - self.lr * grads.classifier
        return ParameterSet(encoder, classifier)


@dataclass
class Adam:
    """Bias-corrected Adam. Moments are keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    kind = "adam"

    def _update(self, key, value, grad):
        m = self.m.get(key)
        if m is None:
            m = self.m[key] = np.zeros_like(value)
            self.v[key] = np.zeros_like(value)
        elif m.shape != value.shape:
            raise ConfigurationError(f"optimizer state for {key} has shape {m.shape}, parameter has {value.shape}")
        v = self.v[key]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**self.t)
        v_hat = v / (1.0 - self.beta2**self.t)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        _check_grads(params, grads)
        self.t += 1
        encoder = dict(params.encoder)
        for k, g in grads.encoder.items():
            encoder[k] = self._update(k, params.encoder[k], g)
        classifier = self._update("classifier", params.classifier, grads.classifier)
        return ParameterSet(encoder, classifier)


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


def _check_grads(params, grads):
    if grads.classifier.shape != params.classifier.shape:
        raise ConfigurationError("classifier gradient shape does not match parameters")
    for k, g in grads.encoder.items():
        if k not in params.encoder or params.encoder[k].shape != g.shape:
            raise ConfigurationError(f"gradient for {k} does not match parameters")
    if not grads.is_finite():
        raise NumericalError("non-finite gradient; optimizer step refused")


# --------------------------------------------------------------------------
# gradient verification


def numeric_grad_check(loss_fn, grads: ParameterSet, params: ParameterSet, include_encoder=True, n_samples=200, eps=1e-4, seed=0):
    """Largest relative error between analytic ``grads`` and central differences.

    ``loss_fn(params)`` returns ``(loss, pattern)``; ``pattern`` is the
    piecewise-linear activation pattern (or ``None``). A parameter whose
    perturbation changes the pattern sits on a kink where finite differences
    are meaningless, so it is replaced by another draw. At least ``n_samples``
    parameters are checked, all of them if there are fewer.

    Returns ``(max_relative_error, n_checked)``.
    """
    keys = [k for k, _ in params.items() if include_encoder or k == "classifier"]
    lookup = dict(params.items())
    sizes = np.array([lookup[k].size for k in keys])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    order = np.random.default_rng(seed).permutation(total)
    _, base_pattern = loss_fn(params)
    grad_lookup = dict(grads.items())
    worst, checked = 0.0, 0
    for fid in order:
        if checked >= n_samples:
            break
        which = int(np.searchsorted(offsets, fid, side="right") - 1)
        key, local = keys[which], int(fid - offsets[which])
        losses = []
        crossed = False
        for sign in (1.0, -1.0):
            p = params.copy()
            target = p.classifier if key == "classifier" else p.encoder[key]
            target.reshape(-1)[local] += sign * eps
            loss, pattern = loss_fn(p)
            crossed |= not _same_pattern(pattern, base_pattern)
            losses.append(loss)
        if crossed:
            continue
        numeric = (losses[0] - losses[1]) / (2 * eps)
        analytic = float(grad_lookup[key].reshape(-1)[local])
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        checked += 1
    return worst, checked


def _same_pattern(a, b):
    if a is None or b is None:
        return a is b
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(net: Network, params: ParameterSet, x: np.ndarray, labels: np.ndarray, n_samples=200, eps=1e-4, seed=0, include_encoder=True) -> float:
    """Max relative error of the cross-entropy gradient, evaluation mode (dropout off)."""
    if net.dtype != np.float64:
        raise ConfigurationError("gradient checks require 64-bit precision")
    _, grads = net.loss_and_grad(params, x, labels, train=False)

    def loss_fn(p):
        fwd = net.forward(p, x, train=False)
        return cross_entropy(fwd.probabilities, labels), net.activation_pattern()

    return numeric_grad_check(loss_fn, grads, params, include_encoder, n_samples, eps, seed)[0]
