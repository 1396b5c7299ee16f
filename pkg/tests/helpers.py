"""Shared builders and pure-Python oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np

from clusterattn.clustering import ClusterIndex, HierarchicalIndex


def random_partition(rng, n_items: int, c: int) -> list[np.ndarray]:
    """Random partition of ``range(n_items)`` into ``c`` non-empty groups."""
    labels = np.concatenate([np.arange(c), rng.integers(0, c, size=n_items - c)])
    labels = rng.permutation(labels)
    return [np.flatnonzero(labels == j) for j in range(c)]


def random_level(rng, L: int, c: int, d: int, spread: float = 1.0) -> ClusterIndex:
    members = random_partition(rng, L, c)
    cents = rng.normal(scale=spread, size=(c, d))
    return ClusterIndex(cents, members, [m.size for m in members])


def random_two_level(rng, L: int, c_coarse: int, c_fine: int, d: int, spread: float = 1.0):
    fine = random_level(rng, L, c_fine, d, spread)
    groups = random_partition(rng, c_fine, c_coarse)
    parents = np.empty(c_fine, dtype=np.int64)
    for j, g in enumerate(groups):
        parents[g] = j
    fine = ClusterIndex(fine.centroids, fine.members, fine.key_weight, parents)
    coarse = ClusterIndex(
        rng.normal(scale=spread, size=(c_coarse, d)),
        groups,
        [int(fine.key_weight[g].sum()) for g in groups],
    )
    return HierarchicalIndex([coarse, fine])


def py_softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def py_attention(q, keys, values, scale=True):
    """Dense attention in plain Python floats."""
    d = len(q)
    logits = [sum(a * b for a, b in zip(q, k)) / (math.sqrt(d) if scale else 1.0) for k in keys]
    p = py_softmax(logits)
    return [sum(p[i] * values[i][j] for i in range(len(values))) for j in range(len(values[0]))]


def py_cluster_scores(q, centroids, weights, scale=True):
    d = len(q)
    logits = [sum(a * b for a, b in zip(q, c)) / (math.sqrt(d) if scale else 1.0) for c in centroids]
    m = max(logits)
    e = [math.exp(x - m) for x in logits]
    D = sum(w * v for w, v in zip(weights, e))
    return [v / D for v in e]
