"""Dense tensor helpers.

Tensors are plain row-major ``numpy.ndarray`` values. This module adds the
strict, broadcast-free constructors and shape operations the rest of the
library relies on.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

#: float32 for training, float64 only for gradient checking.
DEFAULT_DTYPE = np.float32

_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def _check_extents(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    return shape


def create(shape: Sequence[int], fill: float = 0.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.full(_check_extents(shape), fill, dtype=dtype)


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element strides (not bytes) of a C-ordered array of ``shape``."""
    strides = []
    acc = 1
    for extent in reversed(tuple(shape)):
        strides.append(acc)
        acc *= extent
    return tuple(reversed(strides))


def flat_offset(index: Sequence[int], shape: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise ShapeError(f"index rank {len(index)} != tensor rank {len(shape)}")
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
    return sum(i * s for i, s in zip(index, row_major_strides(shape)))


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (no broadcasting)")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(a, b)


def reshape(a: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = _check_extents(new_shape)
    if int(np.prod(new_shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {new_shape}")
    return np.reshape(a, new_shape)


def pad(a: np.ndarray, per_axis_padding: Sequence[tuple[int, int]], value: float = 0.0) -> np.ndarray:
    if len(per_axis_padding) != a.ndim:
        raise ShapeError(f"padding given for {len(per_axis_padding)} axes, tensor has {a.ndim}")
    widths = [(int(lo), int(hi)) for lo, hi in per_axis_padding]
    if any(lo < 0 or hi < 0 for lo, hi in widths):
        raise ShapeError(f"negative padding {widths}")
    if not any(lo or hi for lo, hi in widths):
        return a.copy()
    return np.pad(a, widths, mode="constant", constant_values=value)
