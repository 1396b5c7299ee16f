"""Numeric primitives: validated arrays, stable softmax, and streaming softmax partials.

Stored data is float32. Running softmax statistics (max, denominator, weighted
sum) are carried in float64 so that block partitioning does not change results
beyond rounding of the final cast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Iterable

import numpy as np

from .errors import DimensionError, NoKeysAttendedError

__all__ = [
    "SoftmaxPartial",
    "absorb",
    "as_matrix",
    "as_vector",
    "finalize",
    "merge",
    "merge_all",
    "stable_softmax",
]


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def as_vector(data, name: str = "vector", dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    _check_finite(arr, name)
    return arr


def as_matrix(data, name: str = "matrix", dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    _check_finite(arr, name)
    return arr


def stable_softmax(logits) -> np.ndarray:
    """Max-subtracted softmax, evaluated in float64."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DimensionError("softmax needs a non-empty 1-D input")
    _check_finite(x, "logits")
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass(frozen=True)
class SoftmaxPartial:
    """Softmax statistics for a subset of keys.

    ``out`` is the unnormalized weighted sum of value rows, ``m`` the running
    max logit and ``d`` the running denominator ``sum(exp(logit - m))``.
    The empty partial has ``m = -inf`` and ``d = 0``.
    """

    out: np.ndarray
    m: float
    d: float

    @classmethod
    def empty(cls, dim: int) -> "SoftmaxPartial":
        return cls(np.zeros(dim, dtype=np.float64), -math.inf, 0.0)

    @property
    def dim(self) -> int:
        return self.out.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.d == 0.0


def absorb(partial: SoftmaxPartial, logits, values) -> SoftmaxPartial:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"{logits.shape[0]} logits against values of shape {values.shape}"
        )
    if values.shape[1] != partial.dim:
        raise DimensionError(
            f"value width {values.shape[1]} != partial width {partial.dim}"
        )
    if logits.size == 0:
        return partial
    m_new = max(partial.m, float(logits.max()))
    p = np.exp(logits - m_new)
    block_out = p @ values.astype(np.float64, copy=False)
    if partial.is_empty:
        return SoftmaxPartial(block_out, m_new, float(p.sum()))
    rescale = math.exp(partial.m - m_new)
    return SoftmaxPartial(
        partial.out * rescale + block_out,
        m_new,
        partial.d * rescale + float(p.sum()),
    )


def merge(a: SoftmaxPartial, b: SoftmaxPartial) -> SoftmaxPartial:
    if a.dim != b.dim:
        raise DimensionError(f"cannot merge partials of width {a.dim} and {b.dim}")
    if b.is_empty:
        return a
    if a.is_empty:
        return b
    m = max(a.m, b.m)
    sa = math.exp(a.m - m)
    sb = math.exp(b.m - m)
    return SoftmaxPartial(a.out * sa + b.out * sb, m, a.d * sa + b.d * sb)


def merge_all(partials: Iterable[SoftmaxPartial], dim: int) -> SoftmaxPartial:
    return reduce(merge, partials, SoftmaxPartial.empty(dim))


def finalize(partial: SoftmaxPartial) -> np.ndarray:
    if partial.is_empty:
        raise NoKeysAttendedError("no keys attended: partial is empty")
    return partial.out / partial.d
