"""Toy datasets and a plain-SGD trainer. All randomness is seeded."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn_model import Model, batch_loss_grads, evaluate_accuracy

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def _split(x, y, test_fraction: float, rng) -> Dataset:
    # stratified: the same fraction of every class goes to the test split
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        cut = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:cut])
        train_idx.append(idx[cut:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return Dataset(x[tr], y[tr], x[te], y[te])


def make_blobs(classes: int = 5, dims: int = 16, per_class: int = 200, distance: float = 5.0,
               noise: float = 1.0, seed: int = 0, test_fraction: float = 0.2, layout: str = "simplex") -> Dataset:
    """Gaussian blobs with unit-variance noise scaled by ``noise``.

    ``layout="simplex"`` puts the class means at mutually equal distance
    ``distance`` (needs ``dims >= classes``), so every class is equally
    confusable. ``layout="random"`` draws the means at random with expected
    pairwise distance ``distance``. Small distances give the high-similarity
    regime.
    """
    rng = np.random.default_rng(seed)
    if layout == "simplex":
        if dims < classes:
            raise ValueError(f"simplex layout needs dims >= classes, got {dims} < {classes}")
        basis, _ = np.linalg.qr(rng.standard_normal((dims, classes)))
        centers = basis.T * (distance / np.sqrt(2.0))
    elif layout == "random":
        centers = rng.standard_normal((classes, dims)) * (distance / np.sqrt(2.0 * dims))
    else:
        raise ValueError(f"unknown blob layout {layout!r}")
    y = np.repeat(np.arange(classes), per_class)
    x = (centers[y] + rng.standard_normal((len(y), dims)) * noise).astype(np.float32)
    return _split(x, y, test_fraction, rng)


def make_image_blobs(classes: int = 5, shape=(1, 8, 8), per_class: int = 200, separation: float = 1.0,
                     noise: float = 1.0, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Tiny images: one smoothed random template per class plus pixel noise."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((classes, *shape))
    # 3x3 box blur gives templates some spatial structure for the convolutions
    padded = np.pad(raw, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = shape[1:]
    templates = sum(padded[:, :, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)) / 3.0
    y = np.repeat(np.arange(classes), per_class)
    x = (templates[y] * separation + rng.standard_normal((len(y), *shape)) * noise).astype(np.float32)
    return _split(x, y, test_fraction, rng)


def load_npz(path, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """``x_train/y_train/x_test/y_test`` arrays, or ``x/y`` to be split here."""
    with np.load(path) as z:
        if "x_train" in z:
            return Dataset(z["x_train"].astype(np.float32), z["y_train"].astype(np.int64),
                           z["x_test"].astype(np.float32), z["y_test"].astype(np.int64))
        return _split(z["x"].astype(np.float32), z["y"].astype(np.int64), test_fraction, np.random.default_rng(seed))


@dataclass
class UnlearnSplit:
    forget_x: np.ndarray
    forget_y: np.ndarray
    retain_test_x: np.ndarray
    retain_test_y: np.ndarray
    forget_test_x: np.ndarray
    forget_test_y: np.ndarray


def unlearn_split(ds: Dataset, forget_class: int, N: int) -> UnlearnSplit:
    """First ``N`` training samples of the forget class (in stored order) plus
    held-out retain and forget test sets."""
    idx = np.flatnonzero(ds.y_train == forget_class)
    if len(idx) < N:
        raise ValueError(f"class {forget_class} has {len(idx)} training samples, need N={N}")
    idx = idx[:N]
    rmask = ds.y_test != forget_class
    return UnlearnSplit(ds.x_train[idx], ds.y_train[idx], ds.x_test[rmask], ds.y_test[rmask],
                        ds.x_test[~rmask], ds.y_test[~rmask])


def train_sgd(model: Model, x, y, epochs: int = 30, lr: float = 0.05, batch_size: int = 32, seed: int = 0) -> list[float]:
    """Plain minibatch SGD on cross-entropy, in place. Returns per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    y = np.asarray(y)
    lr32 = np.float32(lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), batch_size):
            b = order[start:start + batch_size]
            loss, grads = batch_loss_grads(model, x[b], y[b])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            for l, gs in grads.items():
                for p, g in zip(model.layer(l).params, gs):
                    p -= lr32 * g
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    return history


def accuracies(model: Model, split: UnlearnSplit) -> tuple[float, float]:
    """(retain test accuracy, forget test accuracy)."""
    return (evaluate_accuracy(model, split.retain_test_x, split.retain_test_y),
            evaluate_accuracy(model, split.forget_test_x, split.forget_test_y))
