"""Exact attention over the fixed context: dense reference and sparse over retrieved keys.

Sparse attention gathers the selected rows, splits them into fixed-size
blocks, folds each block into a SoftmaxPartial and merges the partials. The
blocks are independent work items, so a thread pool can run them in any
order.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, InvariantError, NoKeysAttendedError
from .kvstore import KeyStore
from .lookup import SelectionResult
from .tensorkit import SoftmaxPartial, absorb, finalize, merge_all, stable_softmax

__all__ = [
    "AttentionOutput",
    "AttentionRequest",
    "ErrorBoundReport",
    "attention_scores",
    "dense_attention",
    "dense_attention_head",
    "ideal_lookup",
    "ideal_lookup_head",
    "ideal_topk_head",
    "output_error_bound_check",
    "sparse_attention",
    "sparse_attention_head",
]

DEFAULT_BLOCK = 128
# float32 logits in the sparse path vs float64 in the dense reference
BOUND_SLACK = 1e-5


@dataclass
class AttentionRequest:
    """``q`` is ``(layers, heads, d)`` or ``(layers, heads, n, d)``; ``selected`` maps (layer, head) to key indices."""

    q: np.ndarray
    selected: Mapping[tuple[int, int], np.ndarray]
    block_size: int = DEFAULT_BLOCK


@dataclass
class AttentionOutput:
    out: np.ndarray
    stats: dict = field(default_factory=dict)
    loaded_key_count: dict = field(default_factory=dict)


def attention_scores(q, keys, scale: bool = True) -> np.ndarray:
    """Softmax attention probabilities of one query over all keys, float64."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if q.shape[-1] != keys.shape[1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {keys.shape[1]}")
    logits = keys @ q
    if scale:
        logits /= math.sqrt(keys.shape[1])
    return stable_softmax(logits)


def dense_attention_head(q, keys, values, scale: bool = True) -> np.ndarray:
    """softmax(q K^T / sqrt(d)) V with float64 accumulation; ``q`` may hold several rows."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        return attention_scores(q, keys, scale) @ np.asarray(values, dtype=np.float64)
    return np.stack([dense_attention_head(row, keys, values, scale) for row in q])


def _blocks(n: int, block_size: int):
    return [(s, min(s + block_size, n)) for s in range(0, n, block_size)]


def _sparse_row(q, k_sel, v_sel, block_size, scale, executor, extra, order):
    d = k_sel.shape[1]
    logits = (k_sel @ q).astype(np.float64)
    if scale:
        logits /= math.sqrt(d)
    spans = _blocks(k_sel.shape[0], block_size)
    if order is not None:
        spans = [spans[i] for i in order]

    def work(span):
        s, e = span
        return absorb(SoftmaxPartial.empty(v_sel.shape[1]), logits[s:e], v_sel[s:e])

    if executor is not None:
        partials = list(executor.map(work, spans))
    else:
        partials = [work(span) for span in spans]
    if extra is not None:
        ek, ev = extra
        el = (np.asarray(ek, dtype=np.float32) @ q).astype(np.float64)
        if scale:
            el /= math.sqrt(d)
        partials.append(absorb(SoftmaxPartial.empty(v_sel.shape[1]), el, ev))
    return merge_all(partials, v_sel.shape[1])


def sparse_attention_head(
    q,
    keys,
    values,
    indices,
    block_size: int = DEFAULT_BLOCK,
    scale: bool = True,
    executor: Executor | None = None,
    dynamic_kv: tuple[np.ndarray, np.ndarray] | None = None,
    block_order: Sequence[int] | None = None,
):
    """Exact attention restricted to ``indices``.

    ``dynamic_kv`` holds keys/values of generated tokens; they sit outside
    the index and are always attended. Returns ``(out, partials)`` with one
    SoftmaxPartial per query row.
    """
    if block_size < 1:
        raise ValueError("block_size must be positive")
    indices = np.asarray(indices, dtype=np.int64)
    L = keys.shape[0]
    if indices.size == 0 and dynamic_kv is None:
        raise NoKeysAttendedError("no keys attended: empty selection")
    if indices.size and (indices.min() < 0 or indices.max() >= L):
        raise IndexError(f"selected indices out of range [0, {L})")
    if np.unique(indices).size != indices.size:
        raise ValueError("selected indices contain duplicates")
    k_sel = np.asarray(keys, dtype=np.float32)[indices]
    v_sel = np.asarray(values, dtype=np.float32)[indices]
    q = np.asarray(q, dtype=np.float32)
    rows = q[None, :] if q.ndim == 1 else q
    partials = [
        _sparse_row(r, k_sel, v_sel, block_size, scale, executor, dynamic_kv, block_order)
        for r in rows
    ]
    out = np.stack([finalize(p) for p in partials])
    return (out[0] if q.ndim == 1 else out), partials


def _store_queries(q, store: KeyStore) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    if q.ndim not in (3, 4) or q.shape[:2] != (store.num_layers, store.num_heads):
        raise DimensionError(f"queries of shape {q.shape} do not match the store heads")
    if q.shape[-1] != store.head_dim:
        raise DimensionError(f"query width {q.shape[-1]} != head_dim {store.head_dim}")
    return q


def dense_attention(q, store: KeyStore, scale: bool = True) -> AttentionOutput:
    q = _store_queries(q, store)
    out = np.zeros(q.shape, dtype=np.float64)
    loaded = {}
    for layer, head in store.heads():
        out[layer, head] = dense_attention_head(
            q[layer, head], store.keys[layer, head], store.values[layer, head], scale
        )
        loaded[layer, head] = store.seq_len
    return AttentionOutput(out, {}, loaded)


def sparse_attention(req: AttentionRequest, store: KeyStore, scale: bool = True,
                     threads: int = 1) -> AttentionOutput:
    q = _store_queries(req.q, store)
    out = np.zeros(q.shape, dtype=np.float64)
    stats, loaded = {}, {}
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for layer, head in store.heads():
            idx = np.asarray(req.selected[layer, head])
            out[layer, head], stats[layer, head] = sparse_attention_head(
                q[layer, head], store.keys[layer, head], store.values[layer, head],
                idx, req.block_size, scale, pool,
            )
            loaded[layer, head] = int(idx.size)
    finally:
        if pool is not None:
            pool.shutdown()
    return AttentionOutput(out, stats, loaded)


def ideal_lookup_head(q, keys, T: float, scale: bool = True) -> SelectionResult:
    """Keys whose true attention probability exceeds ``T``."""
    a = attention_scores(q, keys, scale)
    idx = np.flatnonzero(a > T)
    return SelectionResult(idx, np.empty(0, dtype=np.int64), keys.shape[0] + idx.size, [])


def ideal_topk_head(q, keys, k: int, scale: bool = True) -> SelectionResult:
    """The ``k`` keys of highest attention probability (matched-budget ideal lookup)."""
    a = attention_scores(q, keys, scale)
    k = int(min(max(k, 0), a.size))
    idx = np.sort(np.argsort(-a, kind="stable")[:k])
    return SelectionResult(idx, np.empty(0, dtype=np.int64), keys.shape[0] + k, [])


def ideal_lookup(q, store: KeyStore, T: float, scale: bool = True) -> dict:
    q = _store_queries(q, store)
    if q.ndim != 3:
        raise DimensionError("ideal lookup takes one query per head")
    return {
        (layer, head): ideal_lookup_head(q[layer, head], store.keys[layer, head], T, scale)
        for layer, head in store.heads()
    }


@dataclass
class ErrorBoundReport:
    error_inf: float
    dropped_mass: float
    max_value_inf: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.error_inf <= self.bound + BOUND_SLACK * max(1.0, self.max_value_inf)

    def to_dict(self) -> dict:
        return {**self.__dict__, "holds": self.holds}


def output_error_bound_check(q, keys, values, indices, scale: bool = True,
                             block_size: int = DEFAULT_BLOCK) -> ErrorBoundReport:
    """Compare sparse against dense output for one query and check the dropped-mass bound.

    If a fraction ``delta`` of the attention mass is dropped, the output moves
    by at most ``2 * delta * max|v|``. A violation raises InvariantError.
    """
    a = attention_scores(q, keys, scale)
    dense = a @ np.asarray(values, dtype=np.float64)
    sparse, _ = sparse_attention_head(q, keys, values, indices, block_size, scale)
    mask = np.ones(a.size, dtype=bool)
    mask[np.asarray(indices, dtype=np.int64)] = False
    dropped = float(a[mask].sum())
    vmax = float(np.max(np.abs(values)))
    report = ErrorBoundReport(
        error_inf=float(np.max(np.abs(sparse - dense))),
        dropped_mass=dropped,
        max_value_inf=vmax,
        bound=2.0 * dropped * vmax,
    )
    if not report.holds:
        raise InvariantError(
            f"sparse error {report.error_inf:.3e} exceeds bound {report.bound:.3e}"
        )
    return report
