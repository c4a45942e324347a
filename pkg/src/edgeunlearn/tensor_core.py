"""Dense f32 tensors, reproducible GEMM, symmetric INT8 quantization and the
binary tensor record shared by checkpoint and importance files.

Tensors are plain ``numpy.float32`` arrays. Quantized tensors carry an int8
payload plus one positive scale.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import kernels

TENSOR_MAGIC = b"FCBU"
TENSOR_VERSION = 1
DTYPE_F32 = 0
DTYPE_I8 = 1


class FormatError(ValueError):
    """Malformed, truncated or version-mismatched binary file."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedTensor:
    data: np.ndarray  # int8
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def as_f32(x) -> np.ndarray:
    # not np.ascontiguousarray: that promotes 0-d arrays to 1-d
    a = np.asarray(x, dtype=np.float32)
    return a if a.flags.c_contiguous else a.copy(order="C")


def gemm(a, b) -> np.ndarray:
    """``a @ b`` in float32 with each output summed over k in ascending order.

    Deliberately not BLAS: the fixed order makes results bit-reproducible,
    which partial-inference equivalence depends on.
    """
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"gemm expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return kernels.gemm_f32(a, b)


def quantize_symmetric(x) -> QuantizedTensor:
    x = as_f32(x)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    peak = float(np.max(np.abs(x)))
    scale = np.float32(peak / 127.0) if peak > 0 else np.float32(1.0)
    if scale == 0:  # subnormal peak underflows
        scale = np.float32(np.finfo(np.float32).smallest_subnormal)
    # divide in f64 so the only rounding is the final round-half-even
    q = np.rint(x.astype(np.float64) / np.float64(scale))
    q = np.clip(q, -127, 127).astype(np.int8)
    return QuantizedTensor(q, float(scale))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return (q.data.astype(np.float64) * np.float64(np.float32(q.scale))).astype(np.float32)


def fake_quantize(x) -> np.ndarray:
    """Round-trip through INT8; what an INT8 deployment actually computes with."""
    return dequantize(quantize_symmetric(x))


# -- binary records ---------------------------------------------------------

_HEAD = struct.Struct("<4sHBB")


def write_tensor(fh: BinaryIO, t) -> None:
    if isinstance(t, QuantizedTensor):
        dtype, arr = DTYPE_I8, np.asarray(t.data, dtype="<i1")
    else:
        dtype, arr = DTYPE_F32, np.asarray(t, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("rank too large for tensor record")
    fh.write(_HEAD.pack(TENSOR_MAGIC, TENSOR_VERSION, dtype, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())
    if dtype == DTYPE_I8:
        fh.write(struct.pack("<f", t.scale))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO):
    magic, version, dtype, rank = _HEAD.unpack(_read_exact(fh, _HEAD.size))
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor record version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    if dtype == DTYPE_F32:
        data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
        return data.astype(np.float32).reshape(shape)
    if dtype == DTYPE_I8:
        data = np.frombuffer(_read_exact(fh, count), dtype="<i1").astype(np.int8).reshape(shape)
        (scale,) = struct.unpack("<f", _read_exact(fh, 4))
        return QuantizedTensor(data, scale)
    raise FormatError(f"unknown dtype code {dtype}")
