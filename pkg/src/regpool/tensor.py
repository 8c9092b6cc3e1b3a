"""Dense float64 arrays in row-major order.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64`` and C order.
This module adds the handful of shape-checked helpers the rest of the package
relies on, so that shape mismatches surface as :class:`ShapeError` instead of
silently broadcasting.
"""

from __future__ import annotations

import operator
from typing import Callable, Sequence

import numpy as np

from regpool.errors import ShapeError

DTYPE = np.float64

_BINARY_OPS: dict[str, Callable] = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
}


def as_tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    """Copy ``values`` into a contiguous float64 array, optionally reshaped."""
    t = np.array(values, dtype=DTYPE, order="C")
    if shape is not None:
        shape = tuple(int(e) for e in shape)
        if int(np.prod(shape, dtype=np.int64)) != t.size:
            raise ShapeError(f"cannot view {t.size} values as shape {shape}")
        t = t.reshape(shape)
    return t


def zeros(shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(e) for e in shape)
    if any(e < 0 for e in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    return np.zeros(shape, dtype=DTYPE)


def zeros_like(t: np.ndarray) -> np.ndarray:
    return np.zeros(t.shape, dtype=DTYPE)


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Apply ``op`` ("add", "sub", "mul" or "scale") elementwise.

    For "scale", ``b`` is a Python scalar. Every other op requires identical
    shapes; no broadcasting is performed.
    """
    a = np.asarray(a, dtype=DTYPE)
    if op == "scale":
        if np.ndim(b) != 0:
            raise ShapeError("scale expects a scalar factor")
        return a * float(b)
    try:
        fn = _BINARY_OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, factor: float):
    return elementwise("scale", a, factor)


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element strides for a C-ordered array (last axis has stride 1)."""
    strides = []
    acc = 1
    for extent in reversed(shape):
        strides.append(acc)
        acc *= int(extent)
    return tuple(reversed(strides))


def flat_offset(index: Sequence[int], shape: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise ShapeError(f"index {tuple(index)} has wrong rank for shape {tuple(shape)}")
    for i, e in zip(index, shape):
        if not 0 <= i < e:
            raise ShapeError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
    return sum(int(i) * s for i, s in zip(index, row_major_strides(shape)))


def unravel(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    total = int(np.prod(shape, dtype=np.int64))
    if not 0 <= offset < total:
        raise ShapeError(f"offset {offset} out of range for shape {tuple(shape)}")
    index = []
    for s in row_major_strides(shape):
        q, offset = divmod(offset, s)
        index.append(q)
    return tuple(index)


def argmax_window(t: np.ndarray, origin: Sequence[int], extent: tuple[int, int]) -> tuple[int, int]:
    """Window-relative (row, col) of the maximum of a 2D window.

    ``origin`` indexes the leading axes fully and gives the top-left corner on
    the last two axes. Ties resolve to the first position in row-major order.
    """
    t = np.asarray(t)
    h, w = extent
    if h <= 0 or w <= 0:
        raise ShapeError(f"window extent must be positive, got {extent}")
    if len(origin) != t.ndim or t.ndim < 2:
        raise ShapeError(f"origin {tuple(origin)} does not match rank {t.ndim}")
    *lead, r0, c0 = (int(v) for v in origin)
    for i, e in zip(lead, t.shape[:-2]):
        if not 0 <= i < e:
            raise ShapeError(f"origin {tuple(origin)} out of bounds for {t.shape}")
    H, W = t.shape[-2:]
    if r0 < 0 or c0 < 0 or r0 + h > H or c0 + w > W:
        raise ShapeError(f"window at {(r0, c0)} of size {extent} exceeds {(H, W)}")
    window = t[tuple(lead)][r0:r0 + h, c0:c0 + w]
    # np.argmax returns the first occurrence on a C-ordered flattening.
    k = int(np.argmax(window))
    return divmod(k, w)
