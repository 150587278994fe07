"""MNIST-style digit classification: IDX ingestion, a synthetic fallback, and the task."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigurationError, IngestionError
from ..nn import Batch, Network, forward, loss_and_grad
from ..param_space import Activation, Architecture

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
EPOCH_ITERATIONS = 938
SYNTHETIC_TRAIN_COUNT = EPOCH_ITERATIONS * 64  # 60032: same epoch length as MNIST


@dataclass
class Dataset:
    images: np.ndarray  # (count, 784) in [0, 1]
    labels: np.ndarray  # (count,) ints in [0, 9]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigurationError("image and label counts differ")

    def __len__(self):
        return len(self.labels)


def _read_idx(path, expected_magic, ndim):
    path = Path(path)
    data = path.read_bytes()
    header = 4 + 4 * ndim
    if len(data) < 4:
        raise IngestionError("truncated IDX header", offset=len(data), path=path)
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IngestionError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}",
                             offset=0, path=path)
    if len(data) < header:
        raise IngestionError("truncated IDX header", offset=len(data), path=path)
    dims = struct.unpack(f">{ndim}I", data[4:header])
    n_bytes = int(np.prod(dims))
    if len(data) - header < n_bytes:
        raise IngestionError(f"truncated IDX payload: need {n_bytes} bytes after the header, "
                             f"found {len(data) - header}", offset=len(data), path=path)
    return np.frombuffer(data, dtype=np.uint8, count=n_bytes, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair (uint8 payloads, big-endian header)."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"{images.shape[0]} images but {labels.shape[0]} labels",
                             offset=4, path=labels_path)
    if labels.size and labels.max() > 9:
        raise IngestionError("label outside [0, 9]", path=labels_path)
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64))


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as an IDX file (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}[array.ndim]
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def find_mnist(directory):
    """(train, test) IDX path pairs under ``directory``, or None if absent."""
    d = Path(directory)
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    found = {}
    for split, (img, lab) in names.items():
        pair = (d / img, d / lab)
        if not all(p.exists() for p in pair):
            return None
        found[split] = pair
    return found["train"], found["test"]


def digit_templates() -> np.ndarray:
    """Ten fixed 28x28 class patterns in [0, 1] (independent of any seed)."""
    rng = np.random.default_rng(20201030)
    out = np.empty((10, 28, 28))
    for c in range(10):
        coarse = rng.random((7, 7)) ** 2
        img = gaussian_filter(np.kron(coarse, np.ones((4, 4))), sigma=1.5)
        img -= img.min()
        out[c] = img / img.max()
    return out


def synthetic_digits(seed: int, count: int, noise: float = 0.45, max_shift: int = 2) -> Dataset:
    """Seeded stand-in for MNIST: class templates plus shift, contrast and pixel noise.

    With ``noise=0`` and ``max_shift=0`` every image is exactly its class
    template.
    """
    if count < 10:
        raise ConfigurationError("synthetic dataset needs count >= 10")
    rng = np.random.default_rng(seed)
    templates = digit_templates()
    labels = rng.integers(0, 10, size=count)
    images = templates[labels].copy()
    if max_shift:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(count, 2))
        for dy in range(-max_shift, max_shift + 1):
            for dx in range(-max_shift, max_shift + 1):
                sel = np.flatnonzero((shifts[:, 0] == dy) & (shifts[:, 1] == dx))
                if sel.size:
                    images[sel] = np.roll(images[sel], (dy, dx), axis=(1, 2))
    if noise:
        contrast = rng.uniform(1.0 - noise, 1.0, size=(count, 1, 1))
        images = images * contrast + noise * rng.standard_normal(images.shape)
        np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images.reshape(count, 784), labels.astype(np.int64))


@dataclass
class ClassifierTask:
    """784:20:20:20:10 ReLU classifier trained with minibatches of 64."""

    train: Dataset
    test: Dataset
    arch: Architecture = field(default_factory=lambda: Architecture((784, 20, 20, 20, 10), Activation.RELU))
    batch_size: int = 64
    test_batch_size: int = 1000

    @property
    def iterations_per_epoch(self) -> int:
        return -(-len(self.train) // self.batch_size)

    def epoch_batches(self, rng: np.random.Generator):
        """Yield the shuffled minibatches of one epoch."""
        order = rng.permutation(len(self.train))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield Batch(self.train.images[idx], self.train.labels[idx], kind="stochastic")

    def loss_and_grad(self, params, batch: Batch, flops=None):
        return loss_and_grad(Network(self.arch, params), batch, "cross_entropy", flops)

    def evaluate(self, params, data: Dataset | None = None) -> tuple[float, float]:
        """(mean cross-entropy, accuracy) over ``data`` (default: the test split)."""
        data = self.test if data is None else data
        net = Network(self.arch, params)
        total, correct = 0.0, 0
        for start in range(0, len(data), self.test_batch_size):
            x = data.images[start:start + self.test_batch_size]
            y = data.labels[start:start + self.test_batch_size]
            logits = forward(net, x)
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total -= logp[np.arange(len(y)), y].sum()
            correct += int((logits.argmax(axis=1) == y).sum())
        return total / len(data), correct / len(data)


def make_classifier_task(mnist_dir=None, data_seed=0, synthetic_noise=0.45, test_count=10000):
    """Real MNIST when the IDX files are in ``mnist_dir``, synthetic otherwise."""
    found = find_mnist(mnist_dir) if mnist_dir else None
    if found:
        (tr_img, tr_lab), (te_img, te_lab) = found
        return ClassifierTask(load_idx(tr_img, tr_lab), load_idx(te_img, te_lab)), "idx"
    train = synthetic_digits(data_seed, SYNTHETIC_TRAIN_COUNT, noise=synthetic_noise)
    test = synthetic_digits(data_seed + 1_000_003, test_count, noise=synthetic_noise)
    return ClassifierTask(train, test), "synthetic"
