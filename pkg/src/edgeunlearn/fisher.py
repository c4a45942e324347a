"""Diagonal Fisher importance: the mean of squared log-likelihood gradients,
one score per parameter.

With ``group=1`` the gradients are per sample. A larger ``group`` squares the
gradient of the mean log-likelihood of each consecutive group of samples
instead, which is how the unlearning runs use it (one group per forget batch).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .nn_model import Model, forward_trace, iter_backward
from .tensor_core import FormatError, as_f32, read_tensor, write_tensor

IMPORTANCE_MAGIC = b"FCBI"
IMPORTANCE_VERSION = 1
SOURCE_TAGS = {"global": 0, "forget": 1}


class ShapeMismatchError(ValueError):
    pass


@dataclass
class ImportanceMap:
    layers: dict[int, list[np.ndarray]]
    source: str = "forget"
    sample_count: int = 0

    def __getitem__(self, l: int) -> list[np.ndarray]:
        return self.layers[l]

    def check_against(self, model: Model) -> None:
        if sorted(self.layers) != list(model.indices()):
            raise ShapeMismatchError(f"importance covers layers {sorted(self.layers)}, model has 1..{model.L}")
        for l in model.indices():
            want = [p.shape for p in model.layer(l).params]
            have = [t.shape for t in self.layers[l]]
            if want != have:
                raise ShapeMismatchError(f"layer {l}: importance shapes {have} vs parameters {want}")


class FisherAccumulator:
    """Running sum of squared gradients for one layer, in f64; ``count`` is
    the number of gradient rows added."""

    def __init__(self, shapes):
        self.shapes = [tuple(s) for s in shapes]
        self.sums = [np.zeros(int(np.prod(s)), dtype=np.float64) for s in self.shapes]
        self.count = 0

    def add(self, grads: list[np.ndarray]) -> None:
        n = None
        for acc, g in zip(self.sums, grads):
            g2 = as_f32(g).reshape(len(g), -1)
            n = len(g2)
            kernels.square_accumulate(acc, g2)
        self.count += n or 0

    def mean(self) -> list[np.ndarray]:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return [(s / self.count).astype(np.float32).reshape(shape) for s, shape in zip(self.sums, self.shapes)]


def layer_importance(per_sample_grads: list[np.ndarray]) -> list[np.ndarray]:
    acc = FisherAccumulator([g.shape[1:] for g in per_sample_grads])
    acc.add(per_sample_grads)
    return acc.mean()


def _check_batch(x, y):
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("importance needs a non-empty batch")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} labels")
    return y


def estimate_importance(model: Model, x, y, source: str = "forget", chunk: int = 256, group: int = 1) -> ImportanceMap:
    """Importance for every layer. Samples are processed in order, in chunks
    of about ``chunk`` (rounded to whole groups); the result does not depend
    on the chunk size."""
    y = _check_batch(x, y)
    if source not in SOURCE_TAGS:
        raise ValueError(f"source must be one of {sorted(SOURCE_TAGS)}")
    step = max(1, chunk // group) * group
    accs = {l: FisherAccumulator([p.shape for p in model.layer(l).params]) for l in model.indices()}
    for start in range(0, len(y), step):
        xb, yb = x[start:start + step], y[start:start + step]
        for l, grads in iter_backward(model, xb, yb, group=group):
            accs[l].add(grads)
    return ImportanceMap({l: a.mean() for l, a in accs.items()}, source, len(y))


def estimate_importance_layer(model: Model, x, y, l: int, group: int = 1) -> list[np.ndarray]:
    """Importance slice for layer ``l`` only; backward stops once ``l`` is reached."""
    y = _check_batch(x, y)
    if not 1 <= l <= model.L:
        raise IndexError(f"layer index {l} outside 1..{model.L}")
    logits, inputs = forward_trace(model, x)
    for idx, grads in iter_backward(model, x, y, inputs=inputs, logits=logits, group=group):
        if idx == l:
            return layer_importance(grads)
    raise AssertionError("unreachable")


def save_importance(imp: ImportanceMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(IMPORTANCE_MAGIC)
        fh.write(struct.pack("<HBI", IMPORTANCE_VERSION, SOURCE_TAGS[imp.source], imp.sample_count))
        # same order as the checkpoint: input side first
        for l in sorted(imp.layers, reverse=True):
            for t in imp.layers[l]:
                write_tensor(fh, as_f32(t))


def load_importance(path, model: Model | None = None) -> ImportanceMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != IMPORTANCE_MAGIC:
            raise FormatError(f"bad importance magic {magic!r}")
        head = fh.read(struct.calcsize("<HBI"))
        if len(head) != struct.calcsize("<HBI"):
            raise FormatError("truncated importance header")
        version, tag, count = struct.unpack("<HBI", head)
        if version != IMPORTANCE_VERSION:
            raise FormatError(f"unsupported importance version {version}")
        sources = {v: k for k, v in SOURCE_TAGS.items()}
        if tag not in sources:
            raise FormatError(f"unknown source tag {tag}")
        tensors = []
        while fh.peek(1):
            tensors.append(read_tensor(fh))
    if len(tensors) % 2:
        raise FormatError("importance file must hold weight/bias pairs")
    for t in tensors:
        if t.dtype != np.float32 or not np.all(np.isfinite(t)) or np.any(t < 0):
            raise FormatError("importance scores must be finite, non-negative float32")
    n_layers = len(tensors) // 2
    layers = {n_layers - i: tensors[2 * i:2 * i + 2] for i in range(n_layers)}
    imp = ImportanceMap(layers, sources[tag], count)
    if model is not None:
        imp.check_against(model)
    return imp
