"""Datasets: binary parsers, label-set partitioning and a synthetic task with known conditionals."""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
MAX_LABEL_DRAWS = 1000


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigurationError(f"{len(self.images)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.provenance)


@dataclass(frozen=True)
class LabelSet:
    """Ordered subset of global labels with its reverse index (global id -> local row)."""

    global_labels: tuple[int, ...]
    reverse_index: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        labels = tuple(int(y) for y in self.global_labels)
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate labels in label set {labels}")
        object.__setattr__(self, "global_labels", labels)
        object.__setattr__(self, "reverse_index", {y: i for i, y in enumerate(labels)})

    def __len__(self):
        return len(self.global_labels)

    def __contains__(self, y):
        return int(y) in self.reverse_index

    def to_local(self, labels) -> np.ndarray:
        try:
            return np.array([self.reverse_index[int(y)] for y in np.asarray(labels).ravel()], dtype=np.int64)
        except KeyError as exc:
            raise ConfigurationError(f"label {exc.args[0]} is not in label set {self.global_labels}") from None

    def to_global(self, local) -> np.ndarray:
        return np.asarray(self.global_labels, dtype=np.int64)[np.asarray(local, dtype=np.int64)]

    @classmethod
    def full(cls, n_labels: int) -> LabelSet:
        return cls(tuple(range(n_labels)))


# --------------------------------------------------------------------------
# parsers


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an IDX images (uint8, 3 dims) or labels (uint8, 1 dim) payload.

    Images come back as float64 in [0, 1] with shape (N, rows, cols); labels
    as int64 with shape (N,).
    """
    if len(data) < 4:
        raise ParseError("truncated IDX header", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ParseError(f"bad IDX magic number 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError("truncated IDX header", offset=len(data))
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - header
    if payload < expected:
        item = int(np.prod(dims[1:], dtype=np.int64)) if ndim > 1 else 1
        raise ParseError(
            f"IDX payload holds {payload // max(item, 1)} of {dims[0]} items",
            offset=header + (payload // max(item, 1)) * item,
        )
    if payload > expected:
        raise ParseError("trailing bytes after IDX payload", offset=header + expected)
    raw = np.frombuffer(data, dtype=np.uint8, count=expected, offset=header).reshape(dims)
    if ndim == 1:
        labels = raw.astype(np.int64)
        if labels.size and labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise ParseError(f"label value {labels[bad]} outside 0..9", offset=header + bad)
        return labels
    return raw.astype(np.float64) / 255.0


def write_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images)
    raw = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = raw.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + raw.tobytes()


def write_idx_labels(labels) -> bytes:
    raw = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(raw)) + raw.tobytes()


def parse_cifar_bin(data: bytes) -> Dataset:
    """Parse CIFAR-10 binary records: one label byte followed by 3072 channel-major pixels."""
    if len(data) % CIFAR_RECORD:
        full = len(data) // CIFAR_RECORD
        raise ParseError(
            f"CIFAR-10 payload of {len(data)} bytes is not a multiple of {CIFAR_RECORD}",
            offset=full * CIFAR_RECORD,
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(f"label value {labels[bad]} outside 0..9", offset=bad * CIFAR_RECORD)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, "cifar10")


def _read(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _find(directory: Path, names) -> Path:
    for name in names:
        for candidate in (directory / name, directory / (name + ".gz")):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {list(names)} found in {directory}")


def load_fashion_mnist(directory) -> tuple[Dataset, Dataset]:
    """Train and test splits from the four standard IDX files in ``directory``."""
    d = Path(directory)
    out = []
    for split in ("train", "t10k"):
        images = parse_idx(_read(_find(d, [f"{split}-images-idx3-ubyte", f"{split}-images.idx3-ubyte"])))
        labels = parse_idx(_read(_find(d, [f"{split}-labels-idx1-ubyte", f"{split}-labels.idx1-ubyte"])))
        if len(images) != len(labels):
            raise ParseError(f"{split}: {len(images)} images but {len(labels)} labels")
        out.append(Dataset(images[:, None, :, :], labels, "fashion-mnist"))
    return out[0], out[1]


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train = [parse_cifar_bin(_read(_find(d, [f"data_batch_{i}.bin"]))) for i in range(1, 6)]
    test = parse_cifar_bin(_read(_find(d, ["test_batch.bin"])))
    merged = Dataset(np.concatenate([t.images for t in train]), np.concatenate([t.labels for t in train]), "cifar10")
    return merged, test


def data_dir(default=None) -> Path | None:
    """Data directory, overridable through ``FEDLABELS_DATA_DIR``."""
    env = os.environ.get("FEDLABELS_DATA_DIR")
    if env:
        return Path(env)
    return Path(default) if default else None


# --------------------------------------------------------------------------
# partitioning


@dataclass
class PartitionPlan:
    label_sets: list[LabelSet]
    client_indices: list[np.ndarray]
    train_indices: list[np.ndarray]
    val_indices: list[np.ndarray]
    pool_indices: np.ndarray

    @property
    def n_clients(self) -> int:
        return len(self.label_sets)

    def digest(self) -> str:
        h = hashlib.sha256()
        for ls in self.label_sets:
            h.update(np.asarray(ls.global_labels, dtype=np.int64).tobytes())
        for group in (self.client_indices, self.train_indices, self.val_indices, [self.pool_indices]):
            for arr in group:
                h.update(np.asarray(arr, dtype=np.int64).tobytes())
                h.update(b"|")
        return h.hexdigest()


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def draw_label_sets(n_labels: int, m: int, labels_per_client: int, rng) -> list[LabelSet]:
    """Random label sets of size ``labels_per_client``, re-drawn until they cover all labels."""
    rng = _as_rng(rng)
    if not 2 <= labels_per_client <= n_labels:
        raise ConfigurationError(f"labels_per_client must lie in [2, {n_labels}], got {labels_per_client}")
    if m * labels_per_client < n_labels:
        raise ConfigurationError(f"{m} clients with {labels_per_client} labels each cannot cover {n_labels} labels")
    for _ in range(MAX_LABEL_DRAWS):
        sets = [np.sort(rng.choice(n_labels, size=labels_per_client, replace=False)) for _ in range(m)]
        if len(set(np.concatenate(sets).tolist())) == n_labels:
            return [LabelSet(tuple(s.tolist())) for s in sets]
    raise ConfigurationError(f"no covering label assignment found in {MAX_LABEL_DRAWS} draws")


def balanced_counts(total: int, n_parts: int) -> list[int]:
    base, extra = divmod(total, n_parts)
    return [base + (1 if i < extra else 0) for i in range(n_parts)]


def partition(
    dataset: Dataset,
    m: int,
    labels_per_client: int,
    samples_per_client: int,
    unlabeled_pool_size: int,
    rng,
    n_labels: int | None = None,
    val_fraction: float = 0.2,
) -> PartitionPlan:
    """Split ``dataset`` into ``m`` label-restricted clients and an unlabeled server pool.

    Each client receives ``samples_per_client`` samples spread as evenly as
    possible over its labels, drawn without replacement from data outside the
    pool. Different clients may share samples.
    """
    rng = _as_rng(rng)
    n_labels = int(dataset.labels.max()) + 1 if n_labels is None else n_labels
    label_sets = draw_label_sets(n_labels, m, labels_per_client, rng)
    n = len(dataset)
    if unlabeled_pool_size > n:
        raise ConfigurationError(f"unlabeled pool of {unlabeled_pool_size} exceeds dataset size {n}")
    pool = rng.choice(n, size=unlabeled_pool_size, replace=False) if unlabeled_pool_size else np.zeros(0, dtype=np.int64)
    available = np.ones(n, dtype=bool)
    available[pool] = False
    by_label = [np.flatnonzero(available & (dataset.labels == y)) for y in range(n_labels)]

    client_indices, train_indices, val_indices = [], [], []
    for k, ls in enumerate(label_sets):
        chosen = []
        for y, count in zip(ls.global_labels, balanced_counts(samples_per_client, len(ls))):
            if count > len(by_label[y]):
                raise ConfigurationError(
                    f"client {k} needs {count} samples of label {y} but only {len(by_label[y])} are available"
                )
            chosen.append(rng.choice(by_label[y], size=count, replace=False))
        idx = rng.permutation(np.concatenate(chosen))
        n_train = int(round(len(idx) * (1.0 - val_fraction)))
        client_indices.append(idx)
        train_indices.append(idx[:n_train])
        val_indices.append(idx[n_train:])
    return PartitionPlan(label_sets, client_indices, train_indices, val_indices, np.asarray(pool, dtype=np.int64))


# --------------------------------------------------------------------------
# synthetic subset-consistent task


def renormalize(p: np.ndarray, labels) -> np.ndarray:
    """Restrict conditionals ``p`` (..., |Y|) to ``labels`` and renormalize."""
    sub = np.asarray(p)[..., list(labels)]
    return sub / sub.sum(axis=-1, keepdims=True)


@dataclass
class SyntheticTask:
    """Gaussian-mixture inputs labelled by a known linear-softmax function.

    Inputs come from an equal-weight mixture of isotropic Gaussians centred at
    ``means``. The global conditional is ``softmax(x @ weights.T + bias)``;
    client ``k`` observes labels drawn from that conditional renormalized onto
    ``label_sets[k]``, so subset consistency holds exactly.
    """

    means: np.ndarray
    noise: float
    weights: np.ndarray
    bias: np.ndarray
    label_sets: list = field(default_factory=list)

    @classmethod
    def make(cls, n_classes=10, n_features=16, separation=3.0, noise=1.0, sharpness=1.0, label_sets=None, rng=0):
        """Class-aligned task: component ``c`` is centred at a random point of norm ``separation``
        and the labelling weights are ``sharpness`` times the centres, so the labelling function
        is a tempered nearest-centre rule."""
        rng = _as_rng(rng)
        means = rng.standard_normal((n_classes, n_features))
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
        weights = sharpness * means
        bias = -0.5 * sharpness * np.sum(means**2, axis=1)
        sets = [ls if isinstance(ls, LabelSet) else LabelSet(tuple(ls)) for ls in (label_sets or [])]
        return cls(means, noise, weights, bias, sets)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def conditional(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.weights.T + self.bias
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def client_conditional(self, x: np.ndarray, k: int) -> np.ndarray:
        return renormalize(self.conditional(x), self.label_sets[k].global_labels)

    def sample_inputs(self, n: int, rng) -> np.ndarray:
        rng = _as_rng(rng)
        comp = rng.integers(0, len(self.means), size=n)
        return self.means[comp] + self.noise * rng.standard_normal((n, self.n_features))

    def sample(self, n: int, rng) -> Dataset:
        """Inputs and labels from the global distribution."""
        rng = _as_rng(rng)
        x = self.sample_inputs(n, rng)
        return Dataset(x, sample_categorical(self.conditional(x), rng), "synthetic")


def sample_categorical(p: np.ndarray, rng) -> np.ndarray:
    u = _as_rng(rng).random((len(p), 1))
    cdf = np.cumsum(p, axis=1)
    return np.minimum((u > cdf).sum(axis=1), p.shape[1] - 1)


def synth_generate(task: SyntheticTask, n_per_client: int, rng):
    """Per-client datasets drawn under subset-consistent labelling.

    Returns a list of ``(dataset, conditionals)`` pairs; ``conditionals`` is the
    exact client conditional, shape (n, |Y_k|), and labels are global ids.
    """
    rng = _as_rng(rng)
    out = []
    for k, ls in enumerate(task.label_sets):
        x = task.sample_inputs(n_per_client, rng)
        cond = task.client_conditional(x, k)
        local = sample_categorical(cond, rng)
        out.append((Dataset(x, ls.to_global(local), "synthetic"), cond))
    return out
