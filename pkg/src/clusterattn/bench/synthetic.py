"""Synthetic fixed contexts with planted cluster structure."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..kvstore import KeyStore, save_tensors

__all__ = [
    "SyntheticData",
    "SyntheticSpec",
    "TreeData",
    "gen_synthetic",
    "generate",
    "generate_tree",
    "tensor_paths",
]

QUERY_MODES = ("aligned", "random")


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture keys.

    Component means are pairwise at least ``separation`` apart and each key
    is its mean plus isotropic noise of std ``sigma``. Aligned queries point
    at one component's mean, scaled so the logit gap between that component
    and an orthogonal one is ``query_gain``.
    """

    L: int = 4096
    d: int = 64
    num_heads: int = 2
    num_layers: int = 1
    components: int = 10
    separation: float = 10.0
    sigma: float = 1.0
    query_mode: str = "aligned"
    calib_window: int = 100
    query_gain: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.components < 1:
            raise ValueError("components must be >= 1")
        if self.separation <= 0 or self.sigma <= 0:
            raise ValueError("separation and sigma must be positive")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        if min(self.L, self.d, self.num_heads, self.num_layers, self.calib_window) < 1:
            raise ValueError("sizes must be positive")


@dataclass
class SyntheticData:
    store: KeyStore
    means: np.ndarray          # (layers, heads, G, d)
    labels: np.ndarray         # (layers, heads, L)
    query_components: np.ndarray  # (layers, heads, calib_window)
    spec: SyntheticSpec

    def queries(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Fresh queries drawn like the calibration ones; returns (queries, components)."""
        rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, seed, 7]))
        out = np.empty((*self.means.shape[:2], n, self.spec.d), dtype=np.float32)
        comps = np.empty((*self.means.shape[:2], n), dtype=np.int64)
        for layer in range(self.means.shape[0]):
            for head in range(self.means.shape[1]):
                out[layer, head], comps[layer, head] = _draw_queries(
                    self.spec, self.means[layer, head], n, rng
                )
        return out, comps


def _component_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    G, d = spec.components, spec.d
    if G <= d:
        basis, _ = np.linalg.qr(rng.normal(size=(d, G)))
        return basis.T * (spec.separation / math.sqrt(2))
    dirs = rng.normal(size=(G, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    gaps = np.linalg.norm(dirs[:, None] - dirs[None], axis=2)
    closest = gaps[~np.eye(G, dtype=bool)].min()
    return dirs * (spec.separation / closest)


def _draw_queries(spec: SyntheticSpec, means: np.ndarray, n: int, rng: np.random.Generator):
    comps = rng.integers(0, means.shape[0], size=n)
    if spec.query_mode == "aligned":
        radius2 = np.sum(means * means, axis=1)
        scale = spec.query_gain * math.sqrt(spec.d) / np.maximum(radius2, 1e-12)
        q = means[comps] * scale[comps][:, None]
    else:
        q = rng.normal(size=(n, spec.d))
    return q.astype(np.float32), comps


def generate(spec: SyntheticSpec) -> SyntheticData:
    shape = (spec.num_layers, spec.num_heads)
    keys = np.empty((*shape, spec.L, spec.d), dtype=np.float32)
    values = np.empty_like(keys)
    calib = np.empty((*shape, spec.calib_window, spec.d), dtype=np.float32)
    means = np.empty((*shape, spec.components, spec.d))
    labels = np.empty((*shape, spec.L), dtype=np.int64)
    qcomps = np.empty((*shape, spec.calib_window), dtype=np.int64)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_layers * spec.num_heads)
    for i, s in enumerate(seeds):
        layer, head = divmod(i, spec.num_heads)
        rng = np.random.default_rng(s)
        mu = _component_means(spec, rng)
        lab = rng.permutation(spec.L) % spec.components
        keys[layer, head] = mu[lab] + spec.sigma * rng.normal(size=(spec.L, spec.d))
        values[layer, head] = rng.normal(size=(spec.L, spec.d))
        calib[layer, head], qcomps[layer, head] = _draw_queries(spec, mu, spec.calib_window, rng)
        means[layer, head] = mu
        labels[layer, head] = lab
    return SyntheticData(KeyStore(keys, values, calib), means, labels, qcomps, spec)


def tensor_paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_name(prefix.name + ".json"), prefix.with_name(prefix.name + ".bin")


def gen_synthetic(spec: SyntheticSpec, prefix) -> SyntheticData:
    """Generate data and write ``<prefix>.json`` and ``<prefix>.bin``."""
    data = generate(spec)
    header, blob = tensor_paths(prefix)
    save_tensors(data.store, header, blob, extra={"synthetic": asdict(spec)})
    return data


@dataclass
class TreeData:
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    target_leaf: np.ndarray
    leaf_of_key: np.ndarray
    depth: int


def generate_tree(
    L: int,
    d: int = 32,
    top: int = 2,
    branching: int = 2,
    leaf_size: int = 256,
    spread: float = 1.0,
    decay: float = 0.5,
    sigma: float = 1e-5,
    n_queries: int = 100,
    gain: float = 8.0,
    seed: int = 0,
) -> TreeData:
    """Keys drawn around the leaves of a balanced tree of means.

    The children of a node sit at centered offsets around it, in directions
    orthogonal to every offset on the node's ancestor path. Offsets have norm
    ``spread`` at the top level and shrink by ``decay`` per level. Each leaf
    owns exactly ``leaf_size`` keys at shuffled positions. A query targets one
    leaf: its component along each offset on the leaf's path is scaled so the
    on-path child out-scores its siblings by ``2 * gain`` logits (after the
    ``1/sqrt(d)`` scaling) at every level.
    """
    n_leaves, rem = divmod(L, leaf_size)
    levels = 1
    width = top
    while width < n_leaves:
        width *= branching
        levels += 1
    if rem or width != n_leaves:
        raise ValueError(
            f"L={L} is not top * branching**k * leaf_size for top={top}, "
            f"branching={branching}, leaf_size={leaf_size}"
        )
    if levels * max(top, branching) > d:
        raise ValueError(f"d={d} is too small for a {levels}-level tree")
    rng = np.random.default_rng(seed)

    def children(basis: np.ndarray, n: int, norm: float):
        # centered offsets in the orthogonal complement of ``basis``
        u = rng.normal(size=(n, d))
        if basis.size:
            u -= (u @ basis.T) @ basis
        if n > 1:
            u -= u.mean(axis=0)
        u *= norm / np.linalg.norm(u, axis=1, keepdims=True)
        q, _ = np.linalg.qr(np.vstack([basis, u]).T)
        return u, q.T[: basis.shape[0] + min(n, d)]

    root_off, root_basis = children(np.empty((0, d)), top, spread)
    means = root_off
    # sum of off / |off|^2 along each node's path
    pulls = root_off / spread**2
    bases = [root_basis] * top
    for depth in range(1, levels):
        norm = spread * decay**depth
        next_means, next_pulls, next_bases = [], [], []
        for mean, pull, basis in zip(means, pulls, bases):
            off, nb = children(basis, branching, norm)
            next_means.append(mean + off)
            next_pulls.append(pull + off / norm**2)
            next_bases.extend([nb] * branching)
        means = np.vstack(next_means)
        pulls = np.vstack(next_pulls)
        bases = next_bases
    leaf_of_key = rng.permutation(L) // leaf_size
    keys = (means[leaf_of_key] + sigma * rng.normal(size=(L, d))).astype(np.float32)
    values = rng.normal(size=(L, d)).astype(np.float32)
    target = rng.integers(0, n_leaves, size=n_queries)
    queries = (gain * math.sqrt(d) * pulls[target]).astype(np.float32)
    return TreeData(keys, values, queries, target, leaf_of_key, levels)
