"""Offline clustering of fixed-context keys into single- and multi-level centroid indexes.

Assignment runs on unit-normalized keys (cosine similarity). The centroid
stored for lookup is, by default, the mean of the raw member keys, so that
``q @ centroid`` equals the mean logit over the cluster's members.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import InvariantError

if TYPE_CHECKING:
    from .kvstore import KeyStore

log = logging.getLogger(__name__)

__all__ = [
    "ClusterIndex",
    "HierarchicalIndex",
    "IndexSet",
    "KMeansFit",
    "build_index",
    "build_tree_index",
    "clusters_for_fraction",
    "kmeans",
    "spherical_kmeans",
    "validate_hierarchy",
]

MAX_ITER = 50
SHIFT_TOL = 1e-4


@dataclass(eq=False)
class ClusterIndex:
    """One level of clustering.

    ``members[j]`` holds indices into the level below (raw key positions at
    the finest level). ``parents[j]`` is the coarser-level cluster owning
    cluster ``j``, or ``None`` at the coarsest level. ``key_weight[j]`` counts
    the raw keys below cluster ``j``.
    """

    centroids: np.ndarray
    members: list[np.ndarray]
    key_weight: np.ndarray
    parents: np.ndarray | None = None

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        self.members = [np.asarray(m, dtype=np.int64) for m in self.members]
        self.key_weight = np.asarray(self.key_weight, dtype=np.int64)
        if self.parents is not None:
            self.parents = np.asarray(self.parents, dtype=np.int64)

    @property
    def c(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([m.size for m in self.members], dtype=np.int64)

    def gather(self, clusters) -> np.ndarray:
        """Sorted union of the members of ``clusters``."""
        clusters = np.asarray(clusters, dtype=np.int64)
        if clusters.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate([self.members[j] for j in clusters]))

    def __eq__(self, other):
        if not isinstance(other, ClusterIndex):
            return NotImplemented
        if (self.parents is None) != (other.parents is None):
            return False
        return (
            np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.key_weight, other.key_weight)
            and len(self.members) == len(other.members)
            and all(np.array_equal(a, b) for a, b in zip(self.members, other.members))
            and (self.parents is None or np.array_equal(self.parents, other.parents))
        )


@dataclass(eq=False)
class HierarchicalIndex:
    """Centroid levels for one (layer, head), coarsest first."""

    levels: list[ClusterIndex]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> ClusterIndex:
        return self.levels[-1]

    @property
    def centroid_count(self) -> int:
        return sum(level.c for level in self.levels)

    @property
    def counts(self) -> list[int]:
        return [level.c for level in self.levels]

    def __eq__(self, other):
        if not isinstance(other, HierarchicalIndex):
            return NotImplemented
        return len(self.levels) == len(other.levels) and all(
            a == b for a, b in zip(self.levels, other.levels)
        )


@dataclass(eq=False)
class IndexSet:
    """Per-(layer, head) hierarchical indexes over one fixed context."""

    num_layers: int
    num_heads: int
    seq_len: int
    head_dim: int
    heads: list[list[HierarchicalIndex]] = field(default_factory=list)

    def __getitem__(self, key: tuple[int, int]) -> HierarchicalIndex:
        layer, head = key
        return self.heads[layer][head]

    def items(self):
        for layer in range(self.num_layers):
            for head in range(self.num_heads):
                yield (layer, head), self.heads[layer][head]

    @property
    def centroid_count(self) -> int:
        return sum(h.centroid_count for _, h in self.items())

    def __eq__(self, other):
        if not isinstance(other, IndexSet):
            return NotImplemented
        return (
            (self.num_layers, self.num_heads, self.seq_len, self.head_dim)
            == (other.num_layers, other.num_heads, other.seq_len, other.head_dim)
            and all(a == b for (_, a), (_, b) in zip(self.items(), other.items()))
        )


def validate_hierarchy(index: HierarchicalIndex, seq_len: int) -> None:
    """Raise InvariantError unless ``index`` is a well-formed hierarchy over ``seq_len`` keys."""
    if not index.levels:
        raise InvariantError("index has no levels")
    dim = index.levels[0].dim
    for depth, level in enumerate(index.levels):
        n_below = seq_len if depth == index.depth - 1 else index.levels[depth + 1].c
        if level.c == 0:
            raise InvariantError(f"level {depth + 1} has no clusters")
        if level.dim != dim:
            raise InvariantError(f"level {depth + 1} centroid width {level.dim} != {dim}")
        if not np.all(np.isfinite(level.centroids)):
            raise InvariantError(f"level {depth + 1} has non-finite centroids")
        sizes = level.sizes
        if np.any(sizes == 0):
            raise InvariantError(f"level {depth + 1} has an empty cluster")
        flat = np.concatenate(level.members)
        if flat.size != n_below or not np.array_equal(np.sort(flat), np.arange(n_below)):
            raise InvariantError(
                f"level {depth + 1} memberships do not partition [0, {n_below})"
            )
        if depth == 0:
            if level.parents is not None:
                raise InvariantError("coarsest level must not carry parent ids")
        else:
            parent = index.levels[depth - 1]
            if level.parents is None or level.parents.shape != (level.c,):
                raise InvariantError(f"level {depth + 1} is missing parent ids")
            if np.any(level.parents < 0) or np.any(level.parents >= parent.c):
                raise InvariantError(f"level {depth + 1} has out-of-range parent ids")
            for j, kids in enumerate(parent.members):
                if np.any(level.parents[kids] != j):
                    raise InvariantError(
                        f"level {depth + 1} parent ids disagree with level {depth} members"
                    )
        if depth == index.depth - 1:
            expected = sizes
        else:
            below = index.levels[depth + 1].key_weight
            expected = np.array([below[m].sum() for m in level.members], dtype=np.int64)
        if not np.array_equal(level.key_weight, expected):
            raise InvariantError(f"level {depth + 1} key weights are inconsistent")
    if int(index.levels[0].key_weight.sum()) != seq_len:
        raise InvariantError("key weights do not sum to the context length")


@dataclass
class KMeansFit:
    labels: np.ndarray
    unit_centroids: np.ndarray
    objective: list[float]
    n_iter: int
    converged: bool


def _unit_rows(items: np.ndarray) -> np.ndarray:
    x = np.asarray(items, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} zero-norm item(s) treated as zero vectors",
            RuntimeWarning,
            stacklevel=3,
        )
        norms = np.where(zero, 1.0, norms)
    return x / norms[:, None]


def _kmeanspp(unit: np.ndarray, c: int, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    """D^2 seeding; ``greedy`` draws ``2 + ln c`` candidates per step and keeps the best."""
    n = unit.shape[0]
    trials = 2 + int(math.log(c)) if greedy else 1
    chosen = [int(rng.integers(n))]
    dist2 = np.sum((unit - unit[chosen[0]]) ** 2, axis=1)
    for _ in range(1, c):
        total = dist2.sum()
        if total <= 0:
            # all remaining items coincide with a chosen seed
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
            new_d2 = np.sum((unit - unit[nxt]) ** 2, axis=1)
        else:
            cands = rng.choice(n, size=trials, p=dist2 / total)
            best = None
            for cand in cands:
                d2 = np.sum((unit - unit[cand]) ** 2, axis=1)
                pot = np.minimum(dist2, d2).sum()
                if best is None or pot < best[0]:
                    best = (pot, int(cand), d2)
            _, nxt, new_d2 = best
        chosen.append(nxt)
        np.minimum(dist2, new_d2, out=dist2)
    return unit[chosen].copy()


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def spherical_kmeans(
    items,
    c: int,
    rng: np.random.Generator,
    max_iter: int = MAX_ITER,
    tol: float = SHIFT_TOL,
    n_init: int = 1,
    greedy: bool = False,
) -> KMeansFit:
    """Cosine k-means with k-means++ seeding.

    ``objective`` records the within-cluster cosine distance after each
    assignment step; it never increases. With ``n_init > 1`` the run with
    the lowest final objective is kept.
    """
    items = np.asarray(items)
    n = items.shape[0]
    if c < 1 or c > n:
        raise ValueError(f"cannot form {c} clusters from {n} items")
    unit = _unit_rows(items)
    fits = [_lloyd(unit, c, rng, max_iter, tol, greedy) for _ in range(max(1, n_init))]
    return min(fits, key=lambda f: f.objective[-1])


def _lloyd(unit, c, rng, max_iter, tol, greedy) -> KMeansFit:
    n = unit.shape[0]
    cent = _kmeanspp(unit, c, rng, greedy)
    labels = None
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        sims = unit @ cent.T
        new_labels = np.argmax(sims, axis=1)
        counts = np.bincount(new_labels, minlength=c)
        for j in np.flatnonzero(counts == 0):
            # move the single farthest item out of a cluster that can spare it
            own = sims[np.arange(n), new_labels]
            spare = counts[new_labels] > 1
            far = int(np.argmin(np.where(spare, own, np.inf)))
            counts[new_labels[far]] -= 1
            new_labels[far] = j
            counts[j] = 1
            cent[j] = unit[far]
            sims[far] = unit[far] @ cent.T
        own = sims[np.arange(n), new_labels]
        history.append(float(np.sum(1.0 - own)))
        changed = labels is None or not np.array_equal(labels, new_labels)
        labels = new_labels
        sums = np.zeros_like(cent)
        np.add.at(sums, labels, unit)
        upd = _normalize_rows(sums)
        keep = np.linalg.norm(sums, axis=1) == 0
        upd[keep] = cent[keep]
        shift = float(np.mean(np.linalg.norm(upd - cent, axis=1)))
        cent = upd
        if not changed or shift < tol:
            converged = True
            break
    return KMeansFit(labels, cent, history, it, converged)


def _members_from_labels(labels: np.ndarray, c: int) -> list[np.ndarray]:
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(c + 1))
    return [order[bounds[j]:bounds[j + 1]] for j in range(c)]


def kmeans(
    items,
    c: int,
    seed: int | np.random.SeedSequence = 0,
    centroid: str = "raw",
    weights=None,
    n_init: int = 1,
    greedy: bool = False,
) -> ClusterIndex:
    """Cluster ``items`` into ``c`` groups and return a finest-level ClusterIndex.

    ``centroid="raw"`` stores the mean of the original member rows;
    ``"normalized"`` stores the mean of their unit-normalized copies.
    ``weights`` (key counts per item) become the ``key_weight`` of each
    cluster when clustering centroids of a finer level.
    """
    if centroid not in ("raw", "normalized"):
        raise ValueError(f"unknown centroid mode {centroid!r}")
    items = np.asarray(items, dtype=np.float32)
    if c > items.shape[0]:
        raise ValueError(f"cannot form {c} clusters from {items.shape[0]} items")
    rng = np.random.default_rng(seed)
    fit = spherical_kmeans(items, c, rng, n_init=n_init, greedy=greedy)
    members = _members_from_labels(fit.labels, c)
    src = items.astype(np.float64) if centroid == "raw" else _unit_rows(items)
    cents = np.stack([src[m].mean(axis=0) for m in members])
    if weights is None:
        key_weight = np.array([m.size for m in members])
    else:
        weights = np.asarray(weights, dtype=np.int64)
        key_weight = np.array([weights[m].sum() for m in members])
    return ClusterIndex(cents, members, key_weight)


def clusters_for_fraction(fraction: float, seq_len: int) -> int:
    """``ceil(fraction * seq_len)`` evaluated on the decimal value of ``fraction``."""
    return max(1, math.ceil(Fraction(str(fraction)) * seq_len))


def _build_head(keys: np.ndarray, counts: Sequence[int], seed_seq, centroid: str):
    seeds = seed_seq.spawn(len(counts))
    fine_first = list(reversed(counts))
    levels: list[ClusterIndex] = []
    items, weights = keys, None
    for n_clusters, s in zip(fine_first, reversed(seeds)):
        if n_clusters > items.shape[0]:
            warnings.warn(
                f"{n_clusters} clusters requested from {items.shape[0]} items; clamped",
                RuntimeWarning,
                stacklevel=2,
            )
            n_clusters = items.shape[0]
        level = kmeans(items, n_clusters, s, centroid=centroid, weights=weights)
        if levels:
            parents = np.empty(levels[-1].c, dtype=np.int64)
            for j, kids in enumerate(level.members):
                parents[kids] = j
            levels[-1].parents = parents
        levels.append(level)
        items, weights = level.centroids, level.key_weight
    levels.reverse()
    return HierarchicalIndex(levels)


def build_index(
    store: "KeyStore",
    fractions: Sequence[float] = (0.05,),
    seed: int = 0,
    threads: int = 1,
    centroid: str = "raw",
) -> IndexSet:
    """Cluster every (layer, head) of ``store``.

    ``fractions`` are centroid counts as fractions of the context length,
    coarsest first, e.g. ``[0.01, 0.05]``. Coarser levels cluster the
    centroids of the level below.
    """
    fractions = list(fractions)
    if not fractions:
        raise ValueError("at least one level is required")
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError(f"centroid fractions must lie in (0, 1]: {fractions}")
    if any(a >= b for a, b in zip(fractions, fractions[1:])):
        raise ValueError(f"fractions must increase from coarse to fine: {fractions}")
    L = store.seq_len
    counts = [clusters_for_fraction(f, L) for f in fractions]
    root = np.random.SeedSequence(seed)
    jobs = {}
    for layer in range(store.num_layers):
        for head in range(store.num_heads):
            jobs[layer, head] = np.random.SeedSequence(root.entropy, spawn_key=(layer, head))

    def run(key):
        layer, head = key
        return _build_head(store.keys[layer, head], counts, jobs[key], centroid)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            built = dict(zip(jobs, pool.map(run, jobs)))
    else:
        built = {key: run(key) for key in jobs}
    heads = [
        [built[layer, head] for head in range(store.num_heads)]
        for layer in range(store.num_layers)
    ]
    log.info("built %s-level index, counts %s", len(counts), counts)
    return IndexSet(store.num_layers, store.num_heads, L, store.head_dim, heads)


def build_tree_index(
    keys,
    top_clusters: int = 2,
    branching: int = 2,
    leaf_size: int = 256,
    seed: int = 0,
    n_init: int = 3,
) -> HierarchicalIndex:
    """Divisive hierarchy: split top-down until every cluster holds ``leaf_size`` keys or fewer.

    The top level has ``top_clusters`` clusters and every cluster above the
    finest level has up to ``branching`` children, giving ``O(log L)`` levels.
    A cluster already small enough passes through as a single child. Centroids
    are means of the raw descendant keys. Each split keeps the best of
    ``n_init`` greedy-seeded runs, since a bad split cannot be repaired below.
    """
    keys = np.asarray(keys, dtype=np.float32)
    L = keys.shape[0]
    seq = np.random.SeedSequence(seed)
    top = kmeans(keys, min(top_clusters, L), seq.spawn(1)[0], n_init=n_init, greedy=True)
    key_sets = top.members
    level_keys: list[list[np.ndarray]] = [key_sets]
    level_children: list[list[np.ndarray]] = []
    while max(s.size for s in key_sets) > leaf_size:
        next_sets: list[np.ndarray] = []
        children: list[np.ndarray] = []
        node_seeds = seq.spawn(len(key_sets))
        for ks, s in zip(key_sets, node_seeds):
            if ks.size <= leaf_size:
                parts = [ks]
            else:
                sub = kmeans(keys[ks], min(branching, ks.size), s, n_init=n_init, greedy=True)
                parts = [ks[m] for m in sub.members]
            start = len(next_sets)
            next_sets.extend(parts)
            children.append(np.arange(start, start + len(parts)))
        level_children.append(children)
        level_keys.append(next_sets)
        key_sets = next_sets
    levels: list[ClusterIndex] = []
    for depth, sets in enumerate(level_keys):
        sorted_sets = [np.sort(s) for s in sets]
        cents = np.stack([keys[s].astype(np.float64).mean(axis=0) for s in sorted_sets])
        weight = np.array([s.size for s in sets])
        if depth == len(level_keys) - 1:
            members = sorted_sets
        else:
            members = level_children[depth]
        levels.append(ClusterIndex(cents, members, weight))
    for depth in range(1, len(levels)):
        parents = np.empty(levels[depth].c, dtype=np.int64)
        for j, kids in enumerate(levels[depth - 1].members):
            parents[kids] = j
        levels[depth].parents = parents
    return HierarchicalIndex(levels)
