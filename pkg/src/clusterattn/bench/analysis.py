"""Attention skewness and retrieval quality against the dense and ideal oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..attention import attention_scores, ideal_topk_head, sparse_attention_head
from ..clustering import IndexSet
from ..errors import DimensionError, InvariantError
from ..kvstore import KeyStore
from ..lookup import LookupConfig, kv_budget, select_generation_singlepass, select_hierarchical

__all__ = ["HeadQuality", "RunReport", "oracle_compare", "skewness", "skewness_head"]

SCHEMA_VERSION = 1


def skewness_head(q, keys, top_frac: float, scale: bool = True) -> float:
    """Attention mass held by the top ``ceil(top_frac * L)`` keys."""
    if not 0 < top_frac <= 1:
        raise ValueError(f"top_frac must lie in (0, 1], got {top_frac}")
    a = attention_scores(q, keys, scale)
    n = math.ceil(top_frac * a.size)
    if n >= a.size:
        return float(a.sum())
    return float(np.partition(a, a.size - n)[a.size - n:].sum())


def skewness(store: KeyStore, q, top_frac: float = 0.01, scale: bool = True) -> np.ndarray:
    """Per-(layer, head) cumulative top-``top_frac`` attention score for one query per head."""
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (store.num_layers, store.num_heads, store.head_dim):
        raise DimensionError(f"expected one query per head, got shape {q.shape}")
    out = np.empty((store.num_layers, store.num_heads))
    for layer, head in store.heads():
        out[layer, head] = skewness_head(q[layer, head], store.keys[layer, head], top_frac, scale)
    return out


@dataclass
class HeadQuality:
    layer: int
    head: int
    queries: int
    mean_k: float
    index_recall: float
    mass_recall: float
    ideal_mass_recall: float
    min_mass_recall: float
    max_error_inf: float
    mean_comparisons: float
    empty_selections: int

    def to_row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunReport:
    config: dict
    heads: list[HeadQuality]
    budget: float
    meta: dict = field(default_factory=dict)

    @property
    def mass_recall(self) -> float:
        return float(np.mean([h.mass_recall for h in self.heads]))

    @property
    def ideal_mass_recall(self) -> float:
        return float(np.mean([h.ideal_mass_recall for h in self.heads]))

    @property
    def index_recall(self) -> float:
        return float(np.mean([h.index_recall for h in self.heads]))

    @property
    def max_error_inf(self) -> float:
        return float(np.max([h.max_error_inf for h in self.heads]))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "summary": {
                "mass_recall": self.mass_recall,
                "ideal_mass_recall": self.ideal_mass_recall,
                "index_recall": self.index_recall,
                "budget": self.budget,
                "max_error_inf": self.max_error_inf,
                "comparisons_per_token": float(np.mean([h.mean_comparisons for h in self.heads])),
            },
            "heads": [h.to_row() for h in self.heads],
            "meta": self.meta,
        }


def oracle_compare(store: KeyStore, index: IndexSet, cfg: LookupConfig, queries=None,
                   block_size: int = 128) -> RunReport:
    """Token-by-token centroid selection versus dense attention and ideal lookup.

    The ideal lookup keeps, for each query, as many keys as the centroid
    selection did, choosing those of highest true attention. Its captured
    mass is therefore an upper bound; a violation raises InvariantError.
    """
    if queries is None:
        queries = store.calib_queries
    if queries is None:
        raise ValueError("no queries: pass them or store calib_queries")
    queries = np.asarray(queries, dtype=np.float32)
    if queries.ndim != 4 or queries.shape[:2] != (store.num_layers, store.num_heads):
        raise DimensionError(f"queries must be (layers, heads, n, d), got {queries.shape}")
    heads = []
    all_sels = []
    for (layer, head), h in index.items():
        K = store.keys[layer, head]
        V = store.values[layer, head]
        ks, idx_rec, mass, ideal_mass, errs, comps = [], [], [], [], [], []
        empty = 0
        for q in queries[layer, head]:
            if h.depth == 1:
                sel = select_generation_singlepass(q, h, cfg.T, cfg.scale_logits)
            else:
                sel = select_hierarchical(q, h, cfg)
            all_sels.append(sel)
            a = attention_scores(q, K, cfg.scale_logits)
            ideal = ideal_topk_head(q, K, sel.k, cfg.scale_logits)
            got = float(a[sel.indices].sum())
            best = float(a[ideal.indices].sum())
            if best < got - 1e-12:
                raise InvariantError(
                    f"head ({layer}, {head}): ideal mass {best} below centroid mass {got}"
                )
            ks.append(sel.k)
            mass.append(got)
            ideal_mass.append(best)
            comps.append(sel.comparison_count)
            if sel.k == 0:
                empty += 1
                idx_rec.append(0.0)
                continue
            idx_rec.append(np.intersect1d(sel.indices, ideal.indices).size / sel.k)
            sparse, _ = sparse_attention_head(q, K, V, sel.indices, block_size, cfg.scale_logits)
            dense = a @ V.astype(np.float64)
            errs.append(float(np.max(np.abs(sparse - dense))))
        heads.append(HeadQuality(
            layer=layer,
            head=head,
            queries=len(ks),
            mean_k=float(np.mean(ks)),
            index_recall=float(np.mean(idx_rec)),
            mass_recall=float(np.mean(mass)),
            ideal_mass_recall=float(np.mean(ideal_mass)),
            min_mass_recall=float(np.min(mass)),
            max_error_inf=float(np.max(errs)) if errs else float("nan"),
            mean_comparisons=float(np.mean(comps)),
            empty_selections=empty,
        ))
    n = queries.shape[2]
    budget = kv_budget(all_sels, None, store.seq_len)
    centroid_part = index.centroid_count / (2 * store.seq_len * store.num_layers * store.num_heads)
    return RunReport(
        config=cfg.to_dict(),
        heads=heads,
        budget=budget.key_fraction + centroid_part,
        meta={"queries_per_head": n, "block_size": block_size},
    )
