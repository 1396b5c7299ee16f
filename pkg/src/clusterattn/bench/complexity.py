"""Per-token comparison counts as the context grows.

Dense attention compares a query with all ``L`` keys. Single-level lookup
scores ``c`` centroids then attends ``k`` keys. Hierarchical lookup scores
the children of each level's survivors, so with a fixed number of
candidates per level the count grows by that number per added level.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..attention import sparse_attention_head
from ..clustering import IndexSet, build_index, build_tree_index
from ..kvstore import KeyStore
from ..lookup import LookupConfig, calibrate, select_generation_singlepass, select_hierarchical
from .synthetic import SyntheticSpec, generate, generate_tree

__all__ = ["SweepPoint", "complexity_sweep", "dense_point", "hierarchical_point", "single_level_point"]

MODES = ("dense", "single", "hierarchical")


@dataclass
class SweepPoint:
    mode: str
    L: int
    levels: int
    centroids_total: int
    candidates_per_level: list[float]
    mean_comparisons: float
    mean_k: float
    min_comparisons: int
    max_comparisons: int
    queries: int
    timings: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        return {
            "mode": self.mode,
            "L": self.L,
            "levels": self.levels,
            "centroids_total": self.centroids_total,
            "candidates_per_level": " ".join(f"{c:g}" for c in self.candidates_per_level),
            "mean_comparisons": self.mean_comparisons,
            "mean_k": self.mean_k,
            "min_comparisons": self.min_comparisons,
            "max_comparisons": self.max_comparisons,
            "queries": self.queries,
        }


def dense_point(L: int, queries: int = 1) -> SweepPoint:
    return SweepPoint("dense", L, 0, 0, [], float(L), float(L), L, L, queries)


def _attend_all(keys, values, q, sel, block_size):
    if sel.k:
        sparse_attention_head(q, keys, values, sel.indices, block_size)


def hierarchical_point(
    L: int,
    leaf_size: int = 256,
    branching: int = 2,
    d: int = 32,
    calib: int = 100,
    test: int = 100,
    seed: int = 0,
    block_size: int = 128,
    coarse_prune: float = 0.5,
) -> SweepPoint:
    """Tree-structured context; thresholds calibrated per level on held-out queries."""
    t0 = time.perf_counter()
    tree = generate_tree(L, d=d, top=branching, branching=branching, leaf_size=leaf_size,
                         n_queries=calib + test, seed=seed)
    h = build_tree_index(tree.keys, branching, branching, leaf_size, seed=seed + 1)
    t1 = time.perf_counter()
    store = KeyStore(tree.keys[None, None], tree.values[None, None], tree.queries[None, None, :calib])
    index = IndexSet(1, 1, L, d, [[h]])
    cfg = calibrate(
        store, index,
        LookupConfig(target_sparsity=1 - leaf_size / L, coarse_prune=coarse_prune, calib_window=calib),
        per_query=True,
    )
    counts, ks, cands = [], [], []
    for q in tree.queries[calib:]:
        sel = select_hierarchical(q, h, cfg)
        _attend_all(tree.keys, tree.values, q, sel, block_size)
        counts.append(sel.comparison_count)
        ks.append(sel.k)
        cands.append(sel.level_candidates + [0] * (h.depth - len(sel.level_candidates)))
    t2 = time.perf_counter()
    return SweepPoint(
        mode="hierarchical",
        L=L,
        levels=h.depth,
        centroids_total=h.centroid_count,
        candidates_per_level=[float(x) for x in np.mean(cands, axis=0)],
        mean_comparisons=float(np.mean(counts)),
        mean_k=float(np.mean(ks)),
        min_comparisons=int(np.min(counts)),
        max_comparisons=int(np.max(counts)),
        queries=test,
        timings={"build_s": t1 - t0, "lookup_s": t2 - t1},
    )


def single_level_point(
    L: int,
    centroid_fraction: float = 0.05,
    sparsity: float = 0.9,
    d: int = 32,
    calib: int = 100,
    test: int = 100,
    seed: int = 0,
    block_size: int = 128,
) -> SweepPoint:
    """Gaussian-mixture context with one centroid level at a fixed fraction of ``L``."""
    t0 = time.perf_counter()
    data = generate(SyntheticSpec(L=L, d=d, num_heads=1, num_layers=1, calib_window=calib, seed=seed))
    index = build_index(data.store, [centroid_fraction], seed=seed + 1)
    t1 = time.perf_counter()
    cfg = calibrate(data.store, index, LookupConfig(target_sparsity=sparsity, calib_window=calib),
                    per_query=True)
    h = index[0, 0]
    qs, _ = data.queries(test, seed=seed + 2)
    K, V = data.store.keys[0, 0], data.store.values[0, 0]
    counts, ks = [], []
    for q in qs[0, 0]:
        sel = select_generation_singlepass(q, h, cfg.T, cfg.scale_logits)
        _attend_all(K, V, q, sel, block_size)
        counts.append(sel.comparison_count)
        ks.append(sel.k)
    t2 = time.perf_counter()
    return SweepPoint(
        mode="single",
        L=L,
        levels=1,
        centroids_total=h.centroid_count,
        candidates_per_level=[float(h.finest.c)],
        mean_comparisons=float(np.mean(counts)),
        mean_k=float(np.mean(ks)),
        min_comparisons=int(np.min(counts)),
        max_comparisons=int(np.max(counts)),
        queries=test,
        timings={"build_s": t1 - t0, "lookup_s": t2 - t1},
    )


def complexity_sweep(L_values, modes=("dense", "hierarchical"), seed: int = 0, **params) -> list[SweepPoint]:
    """Run every mode at every context length.

    ``params`` are forwarded to the per-mode point functions that accept them.
    """
    L_values = list(L_values)
    if any(b <= a for a, b in zip(L_values, L_values[1:])):
        raise ValueError("L_values must be strictly increasing")
    unknown = set(modes) - set(MODES)
    if unknown:
        raise ValueError(f"unknown modes {sorted(unknown)}")
    hier_keys = {"leaf_size", "branching", "d", "calib", "test", "block_size", "coarse_prune"}
    single_keys = {"centroid_fraction", "sparsity", "d", "calib", "test", "block_size"}
    points = []
    for L in L_values:
        for mode in modes:
            if mode == "dense":
                points.append(dense_point(L, params.get("test", 1)))
            elif mode == "hierarchical":
                kw = {k: v for k, v in params.items() if k in hier_keys}
                points.append(hierarchical_point(L, seed=seed, **kw))
            else:
                kw = {k: v for k, v in params.items() if k in single_keys}
                points.append(single_level_point(L, seed=seed, **kw))
    return points
