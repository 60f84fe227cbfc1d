"""Datasets: MNIST IDX files and Gaussian-mixture toys with a known posterior.

Labels are 0-based everywhere inside the library.  MNIST digit ``d`` is
class index ``d``; user-facing output adds one.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import multivariate_normal

from .errors import DomainError, ParseError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ShapeError("inputs must be an (N, n_x) matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(f"{self.labels.size} labels for {self.inputs.shape[0]} inputs")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DomainError(f"labels outside 0..{self.n_classes - 1}")
        if self.split not in SPLITS:
            raise DomainError(f"unknown split {self.split!r}")

    def __len__(self):
        return self.labels.size

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, split or self.split)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw, n_words, path):
    need = 4 * n_words
    if len(raw) < need:
        raise ParseError(f"{path}: truncated header, {len(raw)} bytes before offset {need}")
    return struct.unpack(f">{n_words}I", raw[:need])


def read_idx_images(path) -> np.ndarray:
    """Images as a ``(count, rows, cols)`` uint8 array."""
    raw = _read_bytes(path)
    magic, *_ = _header(raw, 1, path)
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}")
    _, count, rows, cols = _header(raw, 4, path)
    size = count * rows * cols
    if len(raw) - 16 < size:
        raise ParseError(f"{path}: truncated pixel payload, need {size} bytes from offset 16, have {len(raw) - 16}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    magic, *_ = _header(raw, 1, path)
    if magic != IDX_LABELS_MAGIC:
        raise ParseError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}")
    _, count = _header(raw, 2, path)
    if len(raw) - 8 < count:
        raise ParseError(f"{path}: truncated label payload, need {count} bytes from offset 8, have {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Pair an IDX image file with its label file.

    Pixels are scaled to [0, 1] and each image is flattened row-major.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.size:
        raise ParseError(
            f"count mismatch: {images.shape[0]} images in {images_path}, {labels.size} labels in {labels_path}"
        )
    if labels.size and labels.max() > 9:
        raise ParseError(f"{labels_path}: label {labels.max()} outside 0..9")
    x = images.reshape(images.shape[0], images.shape[1] * images.shape[2]).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), 10, split)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, split: str, n_val: int = 10000) -> Dataset:
    """MNIST split from a directory of the four standard IDX files.

    ``train`` is the training file minus its last ``n_val`` images, ``val``
    those last images, ``test`` the official test file.
    """
    directory = Path(directory)
    if split == "test":
        return load_idx(_find(directory, "t10k-images-idx3-ubyte"), _find(directory, "t10k-labels-idx1-ubyte"), "test")
    if split not in ("train", "val"):
        raise DomainError(f"unknown split {split!r}")
    full = load_idx(_find(directory, "train-images-idx3-ubyte"), _find(directory, "train-labels-idx1-ubyte"))
    cut = len(full) - n_val
    if split == "train":
        return full.subset(slice(0, cut), "train")
    return full.subset(slice(cut, None), "val")


@dataclass
class SyntheticSpec:
    """Gaussian class-conditional densities with class priors."""

    means: np.ndarray
    covs: np.ndarray
    priors: np.ndarray
    n_samples: int
    seed: int = 0

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.priors = np.asarray(self.priors, dtype=np.float64)
        m, d = self.means.shape
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(m, d, d)
        if self.priors.shape != (m,) or np.any(self.priors < 0) or abs(self.priors.sum() - 1) > 1e-12:
            raise DomainError("priors must be a probability vector with one entry per class")
        for k, c in enumerate(self.covs):
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise DomainError(f"covariance of class {k} is not symmetric positive definite")
        if self.n_samples < 0:
            raise DomainError("n_samples must be non-negative")


def bayes_posterior(spec: SyntheticSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Exact class posterior ``p(y | x)`` of the mixture, for one input or a batch."""
    dists = [multivariate_normal(mu, c) for mu, c in zip(spec.means, spec.covs)]
    with np.errstate(divide="ignore"):
        log_prior = np.log(spec.priors)

    def oracle(x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        logp = np.stack([np.atleast_1d(d.logpdf(xb)) for d in dists], axis=1) + log_prior
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        p /= p.sum(axis=1, keepdims=True)
        return p[0] if single else p

    return oracle


def gen_synthetic(spec: SyntheticSpec, split: str = "train") -> tuple[Dataset, Callable]:
    """Draw a labelled sample and return it with the Bayes posterior oracle."""
    rng = np.random.default_rng(spec.seed)
    m, d = spec.means.shape
    labels = rng.choice(m, size=spec.n_samples, p=spec.priors)
    x = np.empty((spec.n_samples, d))
    for k in range(m):
        sel = labels == k
        x[sel] = rng.multivariate_normal(spec.means[k], spec.covs[k], size=int(sel.sum()))
    return Dataset(x, labels, m, split), bayes_posterior(spec)


def three_class_spec(n_samples: int = 5000, seed: int = 0) -> SyntheticSpec:
    """Three 2-D classes sharing one covariance, so the posterior is a softmax of
    an affine function of ``x`` and a multinomial logistic model contains it."""
    means = np.array([[0.0, 0.0], [2.0, 0.5], [0.5, 2.0]])
    cov = np.array([[1.0, 0.3], [0.3, 0.8]])
    return SyntheticSpec(means, np.stack([cov] * 3), np.array([0.3, 0.3, 0.4]), n_samples, seed)

