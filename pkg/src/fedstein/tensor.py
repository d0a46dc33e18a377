"""Dense float64 arrays and the handful of operations the network needs.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major, NCHW for
images. :func:`tensor` is the checked constructor: it rejects NaN/Inf and
returns a read-only array so a tensor can be shared between clients without
defensive copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, EmptyReductionError, NumericError

__all__ = [
    "NormStats",
    "tensor",
    "matmul",
    "channel_moments",
    "conv2d",
    "im2col",
    "elementwise",
    "stable_mean",
]


def tensor(data, shape=None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise DimensionError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and (biased) variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        var = np.asarray(self.var, dtype=np.float64).reshape(-1)
        if mean.shape != var.shape:
            raise DimensionError(f"mean has {mean.size} channels but var has {var.size}")
        if np.any(var < 0):
            raise NumericError("variance entries must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def c(self) -> int:
        return self.mean.size


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _reduce_axes(x: np.ndarray, channel_axis: int):
    if not 0 <= channel_axis < x.ndim:
        raise DimensionError(f"channel axis {channel_axis} out of range for rank {x.ndim}")
    return tuple(i for i in range(x.ndim) if i != channel_axis)


def channel_moments(x, channel_axis: int = 1) -> NormStats:
    """Mean and divide-by-m variance of every channel over all other axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    axes = _reduce_axes(x, channel_axis)
    if x.size == 0 or x.size // x.shape[channel_axis] < 1:
        raise EmptyReductionError("no elements to reduce per channel")
    mean = x.mean(axis=axes)
    var = np.square(x - np.expand_dims(mean, axes)).mean(axis=axes)
    return NormStats(mean, var)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patches of shape (N, OH, OW, C*kh*kw), C-major within a patch."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of an NCHW batch with an OIHW kernel, zero padded."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW and OIHW, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride {stride} or pad {pad}")
    o, _, kh, kw = kernel.shape
    oh, ow = conv_output_size(x.shape[2], x.shape[3], kh, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"output extent ({oh}, {ow}) is not positive")
    cols = im2col(x, kh, kw, stride, pad)
    out = cols @ kernel.reshape(o, -1).T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _broadcastable(a: np.ndarray, b: np.ndarray) -> bool:
    # only trailing-axis broadcasting: b's shape must be a suffix of a's (or scalar)
    if b.ndim > a.ndim:
        a, b = b, a
    return b.ndim == 0 or a.shape[a.ndim - b.ndim:] == b.shape


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}
_UNARY = {
    "relu": lambda a: np.maximum(a, 0.0),
    "exp": np.exp,
    "log": np.log,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY:
        if op == "log" and np.any(a <= 0):
            raise NumericError("log of non-positive value")
        with np.errstate(over="raise"):
            try:
                return _UNARY[op](a)
            except FloatingPointError as exc:
                raise NumericError(f"{op} overflowed") from exc
    if op not in _BINARY:
        raise ValueError(f"unknown op {op!r}")
    if b is None:
        raise ValueError(f"{op} needs two operands")
    b = np.asarray(b, dtype=np.float64)
    if not _broadcastable(a, b):
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}")
    if op == "div" and np.any(b == 0):
        raise NumericError("division by zero")
    return _BINARY[op](a, b)


def stable_mean(arrays, weights=None) -> np.ndarray:
    """Weighted mean computed as first + mean of deviations from it.

    Averaging identical arrays returns the first one bit for bit, which
    plain ``sum / K`` does not guarantee.
    """
    rows = [np.asarray(a, dtype=np.float64) for a in arrays]
    if not rows:
        raise EmptyReductionError("mean of no arrays")
    shape = rows[0].shape
    if any(r.shape != shape for r in rows):
        raise DimensionError(f"cannot average shapes {[r.shape for r in rows]}")
    if weights is None:
        w = np.full(len(rows), 1.0 / len(rows))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    base = rows[0]
    acc = np.zeros(shape)
    for wk, r in zip(w[1:], rows[1:]):
        acc = acc + wk * (r - base)
    return base + acc
