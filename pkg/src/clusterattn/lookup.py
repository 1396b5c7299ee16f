"""Query-time cluster scoring and key selection.

A cluster's score is ``exp(l_i) / sum_j N_j exp(l_j)`` where ``l_i`` is the
query-centroid logit and ``N_j`` the number of keys under cluster ``j``. The
scores estimate per-key attention probabilities, so one global threshold
applies to every head: flat heads clear it with many clusters, peaked heads
with few.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence, Union

import numpy as np

from .clustering import ClusterIndex, HierarchicalIndex, IndexSet
from .errors import CalibrationError, DimensionError
from .kvstore import KeyStore

__all__ = [
    "BudgetReport",
    "GenerationLookupState",
    "LookupConfig",
    "ScoreVector",
    "SelectionResult",
    "calibrate",
    "calibrate_threshold",
    "centroid_logits",
    "expected_budget",
    "generation_state",
    "kv_budget",
    "score_clusters",
    "scores_from_logits",
    "select_generation_singlepass",
    "select_heads",
    "select_hierarchical",
    "select_prefill",
    "select_single_level",
    "weighted_threshold",
]

AnyIndex = Union[ClusterIndex, HierarchicalIndex]


@dataclass(frozen=True)
class LookupConfig:
    T: float = 0.0
    level_thresholds: tuple[float, ...] = ()
    scale_logits: bool = True
    calib_window: int = 100
    target_sparsity: float = 0.9
    coarse_prune: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "level_thresholds", tuple(float(t) for t in self.level_thresholds))
        if not math.isfinite(self.T) or self.T < 0:
            raise ValueError(f"T must be finite and non-negative, got {self.T}")
        if any(not math.isfinite(t) or t < 0 for t in self.level_thresholds):
            raise ValueError(f"level thresholds must be finite and non-negative: {self.level_thresholds}")
        if not 0 <= self.target_sparsity < 1:
            raise ValueError(f"target_sparsity must lie in [0, 1), got {self.target_sparsity}")
        if not 0 <= self.coarse_prune < 1:
            raise ValueError(f"coarse_prune must lie in [0, 1), got {self.coarse_prune}")
        if self.calib_window < 1:
            raise ValueError("calib_window must be positive")

    def thresholds_for(self, depth: int) -> list[float]:
        if depth == 1:
            return [self.T]
        if len(self.level_thresholds) != depth - 1:
            raise ValueError(
                f"{depth}-level index needs {depth - 1} coarse thresholds, "
                f"config has {len(self.level_thresholds)}"
            )
        return [*self.level_thresholds, self.T]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "level_thresholds": list(self.level_thresholds),
            "scale_logits": self.scale_logits,
            "calib_window": self.calib_window,
            "target_sparsity": self.target_sparsity,
            "coarse_prune": self.coarse_prune,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LookupConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        if "level_thresholds" in known:
            known["level_thresholds"] = tuple(known["level_thresholds"])
        return cls(**known)


@dataclass
class ScoreVector:
    scores: np.ndarray
    weights: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights @ self.scores)


@dataclass
class GenerationLookupState:
    m: float
    D: float
    cached: np.ndarray


@dataclass
class SelectionResult:
    """Keys retrieved for one (layer, head).

    ``clusters`` are the selected finest-level clusters; ``level_candidates``
    the number of centroids scored at each level.
    """

    indices: np.ndarray
    clusters: np.ndarray
    comparison_count: int
    level_candidates: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.indices.size)


def _levels_of(index: AnyIndex) -> list[ClusterIndex]:
    if isinstance(index, ClusterIndex):
        return [index]
    return list(index.levels)


def _finest(index: AnyIndex) -> ClusterIndex:
    return index if isinstance(index, ClusterIndex) else index.finest


def centroid_logits(q, centroids: np.ndarray, scale_logits: bool = True) -> np.ndarray:
    """Query-centroid dot products in float32, returned as float64.

    ``q`` may be one query (``(d,)``) or a block of rows (``(n, d)``).
    """
    q = np.asarray(q, dtype=np.float32)
    d = centroids.shape[1]
    if q.shape[-1] != d:
        raise DimensionError(f"query width {q.shape[-1]} != centroid width {d}")
    logits = (q @ centroids.T).astype(np.float64)
    if scale_logits:
        logits /= math.sqrt(d)
    return logits


def _exp_and_denominator(logits: np.ndarray, weights: np.ndarray):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    D = e @ weights.astype(np.float64)
    return m, e, D


def scores_from_logits(logits, weights) -> ScoreVector:
    logits = np.asarray(logits, dtype=np.float64)
    weights = np.asarray(weights)
    if logits.shape != weights.shape or logits.ndim != 1 or logits.size == 0:
        raise DimensionError("logits and weights must be matching non-empty vectors")
    _, e, D = _exp_and_denominator(logits, weights)
    return ScoreVector(e / D, weights)


def score_clusters(q, level: ClusterIndex, cfg: LookupConfig | None = None) -> ScoreVector:
    cfg = cfg or LookupConfig()
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 1:
        raise DimensionError("score_clusters takes a single query vector")
    return scores_from_logits(centroid_logits(q, level.centroids, cfg.scale_logits), level.key_weight)


def _select(Q: np.ndarray, levels: Sequence[ClusterIndex], thresholds: Sequence[float],
            scale_logits: bool) -> SelectionResult:
    """Level-by-level pruning; scores are averaged over the rows of ``Q``."""
    n = Q.shape[0]
    cand = np.arange(levels[0].c)
    count = 0
    level_candidates: list[int] = []
    last = len(levels) - 1
    clusters = np.empty(0, dtype=np.int64)
    for depth, level in enumerate(levels):
        level_candidates.append(int(cand.size))
        count += n * int(cand.size)
        logits = centroid_logits(Q, level.centroids[cand], scale_logits)
        _, e, D = _exp_and_denominator(logits, level.key_weight[cand])
        keep = cand[_above(e, D, thresholds[depth])]
        if depth == last:
            clusters = keep
        else:
            cand = level.gather(keep)
            if cand.size == 0:
                break
    indices = levels[-1].gather(clusters)
    count += n * int(indices.size)
    return SelectionResult(indices, clusters, count, level_candidates)


def _above(e: np.ndarray, D: np.ndarray, T: float) -> np.ndarray:
    """Mask of clusters whose (row-averaged) score exceeds ``T``.

    Scores are strictly positive, so ``T = 0`` keeps everything even where
    ``exp`` underflows. A single row compares ``e > D * T`` like the
    single-pass path.
    """
    if T == 0:
        return np.ones(e.shape[-1], dtype=bool)
    if e.shape[0] == 1:
        return e[0] > D[0] * T
    return (e / D[:, None]).mean(axis=0) > T


def _as_rows(Q, d: int) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float32)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise DimensionError("need at least one query row")
    if Q.shape[1] != d:
        raise DimensionError(f"query width {Q.shape[1]} != centroid width {d}")
    return Q


def select_single_level(q, index: AnyIndex, T: float, scale_logits: bool = True) -> SelectionResult:
    """Select clusters of the finest level whose score exceeds ``T``."""
    level = _finest(index)
    return _select(_as_rows(q, level.dim), [level], [T], scale_logits)


def select_hierarchical(q, index: HierarchicalIndex, cfg: LookupConfig) -> SelectionResult:
    """Coarse-to-fine selection.

    At each level only the children of surviving clusters are scored, and
    the score denominator runs over those candidates alone.
    """
    if index.depth < 2:
        raise ValueError("hierarchical selection needs at least two levels")
    return _select(_as_rows(q, index.finest.dim), index.levels,
                   cfg.thresholds_for(index.depth), cfg.scale_logits)


def select_prefill(Q, index: AnyIndex, cfg: LookupConfig) -> SelectionResult:
    """Selection for a block of query rows using scores averaged over the rows, per level."""
    levels = _levels_of(index)
    return _select(_as_rows(Q, levels[0].dim), levels, cfg.thresholds_for(len(levels)),
                   cfg.scale_logits)


def generation_state(q, level: ClusterIndex, scale_logits: bool = True) -> GenerationLookupState:
    logits = centroid_logits(np.asarray(q, dtype=np.float32)[None, :], level.centroids, scale_logits)
    m, e, D = _exp_and_denominator(logits, level.key_weight)
    return GenerationLookupState(float(m[0, 0]), float(D[0]), e[0])


def select_generation_singlepass(q, index: AnyIndex, T: float,
                                 scale_logits: bool = True) -> SelectionResult:
    """Single-token selection comparing cached ``exp(l_i - m)`` against ``D * T``.

    Both sides carry the same ``exp(-m)`` factor, so the max subtraction is
    folded into the threshold and scores are never materialized.
    """
    level = _finest(index)
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 1:
        raise DimensionError("generation lookup takes a single query vector")
    state = generation_state(q, level, scale_logits)
    clusters = np.arange(level.c) if T == 0 else np.flatnonzero(state.cached > state.D * T)
    indices = level.gather(clusters)
    return SelectionResult(indices, clusters, level.c + indices.size, [level.c])


def select_heads(queries, index: IndexSet, cfg: LookupConfig,
                 mode: str = "auto") -> dict[tuple[int, int], SelectionResult]:
    """Run selection for every (layer, head).

    ``queries`` has shape ``(layers, heads, d)`` for one token or
    ``(layers, heads, n, d)`` for a prefill block. ``mode`` is ``"single"``
    (finest level only), ``"hierarchical"``, ``"generation"`` (single-pass,
    one token, finest level) or ``"auto"`` (all levels of the index).
    """
    queries = np.asarray(queries, dtype=np.float32)
    out = {}
    for (layer, head), h in index.items():
        q = queries[layer, head]
        if mode == "generation":
            out[layer, head] = select_generation_singlepass(q, h, cfg.T, cfg.scale_logits)
        elif mode == "single":
            out[layer, head] = _select(_as_rows(q, h.finest.dim), [h.finest], [cfg.T],
                                       cfg.scale_logits)
        elif mode in ("hierarchical", "auto"):
            out[layer, head] = select_prefill(q, h, cfg)
        else:
            raise ValueError(f"unknown selection mode {mode!r}")
    return out


def weighted_threshold(scores, weights, target_weight: float) -> float:
    """Threshold retaining the weight closest to ``target_weight`` under ``score > T``.

    Cuts fall only between distinct score values; the threshold is the
    midpoint of the two values straddling the cut.
    """
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.size == 0:
        raise CalibrationError("no scores to calibrate on")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    cum = np.concatenate([[0.0], np.cumsum(weights[order])])
    n = s.size
    cuts = np.concatenate([[0], np.flatnonzero(s[:-1] > s[1:]) + 1, [n]])
    j = int(cuts[np.argmin(np.abs(cum[cuts] - target_weight))])
    if j == 0:
        return float(s[0] * 1.5) if s[0] > 0 else 1.0
    if j == n:
        return float(s[-1] / 2)
    return float((s[j - 1] + s[j]) / 2)


def _calibration_queries(store: KeyStore, cfg: LookupConfig, queries) -> np.ndarray:
    if queries is None:
        queries = store.calib_queries
    if queries is None:
        raise CalibrationError(
            "no calibration queries: supply them as the 'calib_queries' tensor "
            "or pass queries explicitly"
        )
    queries = np.asarray(queries, dtype=np.float32)
    expected = (store.num_layers, store.num_heads)
    if queries.ndim != 4 or queries.shape[:2] != expected or queries.shape[3] != store.head_dim:
        raise DimensionError(f"calibration queries have shape {queries.shape}")
    return queries[:, :, -cfg.calib_window:, :]


def calibrate(store: KeyStore, index: IndexSet, cfg: LookupConfig, queries=None,
              per_query: bool = False) -> LookupConfig:
    """Fit the global threshold (and coarse-level thresholds) on calibration queries.

    Coarse levels prune ``cfg.coarse_prune`` of the candidate keys reaching
    them; the finest level keeps ``1 - cfg.target_sparsity`` of all keys.
    With ``per_query=False`` scores are averaged over the calibration queries
    as in prefill; with ``per_query=True`` every query is scored on its own,
    matching token-by-token generation.
    """
    if store.seq_len <= cfg.calib_window:
        raise CalibrationError(
            f"context of {store.seq_len} keys is not longer than the "
            f"calibration window ({cfg.calib_window})"
        )
    Q = _calibration_queries(store, cfg, queries)
    depths = {h.depth for _, h in index.items()}
    if len(depths) != 1:
        raise CalibrationError(f"heads have differing index depths {sorted(depths)}")
    depth = depths.pop()
    n = Q.shape[2]
    groups = []
    for (layer, head), h in index.items():
        rows = Q[layer, head]
        if per_query:
            groups.extend((h, rows[i:i + 1], np.arange(h.levels[0].c)) for i in range(n))
        else:
            groups.append((h, rows, np.arange(h.levels[0].c)))
    unit = 1.0 / n if per_query else 1.0
    total_keys = store.seq_len * store.num_layers * store.num_heads
    thresholds = []
    for d in range(depth):
        scored = []
        for h, rows, cand in groups:
            if cand.size == 0:
                scored.append(None)
                continue
            level = h.levels[d]
            logits = centroid_logits(rows, level.centroids[cand], cfg.scale_logits)
            _, e, D = _exp_and_denominator(logits, level.key_weight[cand])
            scored.append((e / D[:, None]).mean(axis=0))
        live = [(g, s) for g, s in zip(groups, scored) if s is not None]
        if not live:
            raise CalibrationError(f"every candidate was pruned before level {d + 1}")
        all_scores = np.concatenate([s for _, s in live])
        all_weights = np.concatenate([g[0].levels[d].key_weight[g[2]] * unit for g, _ in live])
        if d < depth - 1:
            target = (1.0 - cfg.coarse_prune) * all_weights.sum()
        else:
            target = (1.0 - cfg.target_sparsity) * total_keys
        T = weighted_threshold(all_scores, all_weights, target)
        thresholds.append(T)
        if d < depth - 1:
            groups = [
                (h, rows, h.levels[d].gather(cand[s > T]) if s is not None else cand)
                for (h, rows, cand), s in zip(groups, scored)
            ]
    return replace(cfg, T=thresholds[-1], level_thresholds=tuple(thresholds[:-1]))


def calibrate_threshold(store: KeyStore, index: IndexSet, cfg: LookupConfig, queries=None,
                        per_query: bool = False) -> float:
    return calibrate(store, index, cfg, queries, per_query).T


@dataclass
class BudgetReport:
    budget: float
    key_fraction: float
    centroid_fraction: float
    selected_keys: int
    centroid_count: int
    comparison_count: int
    heads: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def kv_budget(sel, index, L: int) -> BudgetReport:
    """Fraction of K/V bytes loaded relative to dense attention.

    Selected keys load a key and a value row each; centroids are key-only and
    count half. All levels' centroids are charged. ``sel`` is one
    SelectionResult, a mapping of them per head, or a sequence (one entry per
    head and token); ``index`` may be ``None`` for a dense run.
    """
    if isinstance(sel, SelectionResult):
        sels = [sel]
    elif isinstance(sel, Mapping):
        sels = list(sel.values())
    else:
        sels = list(sel)
    heads = len(sels)
    if isinstance(index, IndexSet):
        centroids = index.centroid_count
    elif isinstance(index, HierarchicalIndex):
        centroids = index.centroid_count * heads
    elif isinstance(index, ClusterIndex):
        centroids = index.c * heads
    elif index is None:
        centroids = 0
    else:
        raise TypeError(f"unsupported index type {type(index).__name__}")
    keys = sum(s.k for s in sels)
    denom = 2 * L * heads
    return BudgetReport(
        budget=float(Fraction(2 * keys + centroids, denom)),
        key_fraction=float(Fraction(keys, L * heads)),
        centroid_fraction=float(Fraction(centroids, L * heads)),
        selected_keys=keys,
        centroid_count=centroids,
        comparison_count=sum(s.comparison_count for s in sels),
        heads=heads,
    )


def expected_budget(sparsity: float, centroid_fractions: Sequence[float]) -> float:
    """Configured budget: retained key fraction plus half the centroid fraction."""
    kept = 1 - Fraction(str(sparsity))
    cents = sum((Fraction(str(f)) for f in centroid_fractions), Fraction(0))
    return float(kept + cents / 2)
