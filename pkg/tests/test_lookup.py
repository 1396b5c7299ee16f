import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterattn.bench.synthetic import SyntheticSpec, generate
from clusterattn.clustering import ClusterIndex, HierarchicalIndex, IndexSet, build_index
from clusterattn.errors import CalibrationError, DimensionError
from clusterattn.kvstore import KeyStore
from clusterattn.lookup import (
    LookupConfig,
    calibrate,
    calibrate_threshold,
    expected_budget,
    generation_state,
    kv_budget,
    score_clusters,
    scores_from_logits,
    select_generation_singlepass,
    select_heads,
    select_hierarchical,
    select_prefill,
    select_single_level,
    weighted_threshold,
)

from helpers import py_cluster_scores, random_level, random_two_level

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from([8, 64, 128]), st.integers(1, 40))
def test_weighted_scores_normalize(seed, d, c):
    rng = np.random.default_rng(seed)
    level = random_level(rng, max(c, 100), c, d, spread=3.0)
    s = score_clusters(rng.normal(size=d) * 3, level)
    assert abs(float(s.scores @ s.weights) - 1.0) <= 1e-12


def test_scores_match_mpmath():
    mpmath.mp.dps = 40
    logits = [700.0, 699.0, 650.0, -20.0]
    weights = [3, 1, 10, 2]
    den = sum(w * mpmath.e ** mpmath.mpf(x) for x, w in zip(logits, weights))
    want = [float(mpmath.e ** mpmath.mpf(x) / den) for x in logits]
    np.testing.assert_allclose(scores_from_logits(logits, weights).scores, want, rtol=1e-13)


def test_scores_match_python_reference():
    rng = np.random.default_rng(3)
    level = random_level(rng, 64, 8, 8)
    q = rng.normal(size=8).astype(np.float32)
    want = py_cluster_scores(q.tolist(), level.centroids.tolist(), level.key_weight.tolist())
    np.testing.assert_allclose(score_clusters(q, level).scores, want, rtol=1e-6)


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(-500, 500))
def test_selection_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=20) * 5
    w = rng.integers(1, 10, size=20)
    T = float(rng.uniform(0, 0.05))
    a = scores_from_logits(logits, w).scores > T
    b = scores_from_logits(logits + shift, w).scores > T
    # a shift leaves scores equal to rounding; only knife-edge ties may flip
    s = scores_from_logits(logits, w).scores
    edge = np.abs(s - T) < 1e-9 * max(T, 1e-300)
    assert np.array_equal(a[~edge], b[~edge])


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from([1.0, 30.0, 300.0]))
def test_singlepass_matches_single_level(seed, spread):
    rng = np.random.default_rng(seed)
    d = int(rng.choice([8, 64]))
    level = random_level(rng, 200, 25, d, spread)
    q = rng.normal(size=d)
    s = score_clusters(q, level).scores
    T = float(rng.choice(s)) * float(rng.uniform(0.5, 1.5))
    a = select_generation_singlepass(q, level, T)
    b = select_single_level(q, level, T)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert a.comparison_count == level.c + a.k


def test_generation_state_recovers_scores():
    rng = np.random.default_rng(0)
    level = random_level(rng, 50, 6, 8)
    q = rng.normal(size=8)
    st_ = generation_state(q, level)
    np.testing.assert_allclose(st_.cached / st_.D, score_clusters(q, level).scores, rtol=1e-12)
    assert st_.cached.max() == 1.0


def test_threshold_monotone_and_per_head_adaptive():
    rng = np.random.default_rng(7)
    level = random_level(rng, 300, 30, 16, spread=2.0)
    q = rng.normal(size=16) * 3
    prev = None
    for T in np.linspace(0, 0.02, 30):
        cur = set(select_single_level(q, level, T).indices.tolist())
        if prev is not None:
            assert cur <= prev
        prev = cur
    # one threshold, two heads with different score spreads, different key counts
    flat = ClusterIndex(level.centroids * 0.01, level.members, level.key_weight)
    T = 1.5 / 300
    assert select_single_level(q, flat, T).k != select_single_level(q, level, T).k


def _py_two_level(q, h, t1, t2, scale=False):
    """Two-level selection computed from first principles."""
    coarse, fine = h.levels
    s1 = py_cluster_scores(q, coarse.centroids.tolist(), coarse.key_weight.tolist(), scale)
    kept = [j for j, s in enumerate(s1) if s > t1]
    cand = sorted(i for j in kept for i in coarse.members[j].tolist())
    if not cand:
        return []
    s2 = py_cluster_scores(q, [fine.centroids[i].tolist() for i in cand],
                           [int(fine.key_weight[i]) for i in cand], scale)
    out = [k for i, s in zip(cand, s2) if s > t2 for k in fine.members[i].tolist()]
    return sorted(out)


def test_sixteen_key_hierarchy_enumerated():
    fine = ClusterIndex(
        [[3, 0], [1, 0], [0, 2], [0, -1]],
        [np.arange(0, 4), np.arange(4, 8), np.arange(8, 12), np.arange(12, 16)],
        [4, 4, 4, 4],
        [0, 0, 1, 1],
    )
    coarse = ClusterIndex([[2, 0], [0, 0.5]], [np.array([0, 1]), np.array([2, 3])], [8, 8])
    h = HierarchicalIndex([coarse, fine])
    q = [1.0, 1.0]
    grid = [0.0, 0.01, 0.03, 0.05, 0.07, 0.1, 0.2]
    for t1, t2 in itertools.product(grid, grid):
        got = select_hierarchical(q, h, LookupConfig(T=t2, level_thresholds=(t1,), scale_logits=False))
        assert got.indices.tolist() == _py_two_level(q, h, t1, t2), (t1, t2)
    # coarse logits 2 and 0.5: S = e^2/(8e^2+8e^0.5) vs e^0.5/(...)
    s_hi = math.exp(2) / (8 * math.exp(2) + 8 * math.exp(0.5))
    cfg = LookupConfig(T=0.0, level_thresholds=(s_hi - 1e-6,), scale_logits=False)
    sel = select_hierarchical(q, h, cfg)
    assert sel.indices.tolist() == list(range(8))
    assert sel.level_candidates == [2, 2] and sel.comparison_count == 2 + 2 + 8


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_two_level_matches_reference(seed):
    rng = np.random.default_rng(seed)
    h = random_two_level(rng, 60, 3, 9, 4, spread=2.0)
    q = rng.normal(size=4).tolist()
    t1 = float(rng.uniform(0, 1 / 30))
    t2 = float(rng.uniform(0, 1 / 30))
    got = select_hierarchical(q, h, LookupConfig(T=t2, level_thresholds=(t1,), scale_logits=False))
    assert got.indices.tolist() == _py_two_level(q, h, t1, t2)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_zero_coarse_threshold_reduces_to_single_level(seed):
    rng = np.random.default_rng(seed)
    h = random_two_level(rng, 80, 4, 12, 8)
    q = rng.normal(size=8)
    T = float(rng.uniform(0, 1 / 40))
    a = select_hierarchical(q, h, LookupConfig(T=T, level_thresholds=(0.0,)))
    b = select_single_level(q, h, T)
    np.testing.assert_array_equal(a.indices, b.indices)


def test_prefill_averages_scores():
    rng = np.random.default_rng(2)
    level = random_level(rng, 100, 10, 8)
    Q = rng.normal(size=(5, 8)) * 2
    mean = np.mean([score_clusters(q, level).scores for q in Q], axis=0)
    T = float(np.median(mean))
    sel = select_prefill(Q, level, LookupConfig(T=T))
    np.testing.assert_array_equal(sel.clusters, np.flatnonzero(mean > T))
    assert sel.comparison_count == 5 * (10 + sel.k)
    one = select_prefill(Q[:1], level, LookupConfig(T=T))
    np.testing.assert_array_equal(one.indices, select_single_level(Q[0], level, T).indices)


def test_select_heads_modes():
    rng = np.random.default_rng(4)
    h = random_two_level(rng, 40, 2, 5, 4)
    idx = IndexSet(1, 2, 40, 4, [[h, h]])
    q = rng.normal(size=(1, 2, 4))
    cfg = LookupConfig(T=0.01, level_thresholds=(0.0,))
    for mode in ("auto", "hierarchical", "single", "generation"):
        out = select_heads(q, idx, cfg, mode=mode)
        assert set(out) == {(0, 0), (0, 1)}
    with pytest.raises(ValueError):
        select_heads(q, idx, cfg, mode="bogus")
    with pytest.raises(DimensionError):
        select_single_level(np.zeros(3), h, 0.1)


@settings(max_examples=300, deadline=None)
@given(seeds, st.integers(1, 8), st.floats(0, 1))
def test_weighted_threshold_picks_closest_cut(seed, n, frac):
    rng = np.random.default_rng(seed)
    scores = rng.integers(1, 6, size=n).astype(float) / 10
    weights = rng.integers(1, 5, size=n).astype(float)
    target = frac * weights.sum()
    T = weighted_threshold(scores, weights, target)
    got = weights[scores > T].sum()
    # every threshold realizes one of these retained weights
    achievable = {weights[scores > t].sum() for t in [-1.0, *scores.tolist()]}
    assert abs(got - target) == pytest.approx(min(abs(a - target) for a in achievable))
    assert T > 0


def test_weighted_threshold_empty():
    with pytest.raises(CalibrationError):
        weighted_threshold([], [], 1.0)


def _mixture(L=2048, d=32, heads=2, window=100, mode="aligned"):
    return generate(SyntheticSpec(L=L, d=d, num_heads=heads, calib_window=window, query_mode=mode))


@pytest.mark.parametrize("sparsity", [0.7, 0.8, 0.9])
def test_calibration_hits_target_on_calibration_set(sparsity):
    data = _mixture(mode="random")
    idx = build_index(data.store, [0.05], seed=1)
    cfg = calibrate(data.store, idx, LookupConfig(target_sparsity=sparsity))
    Q = data.store.calib_queries
    kept = sum(select_prefill(Q[l, h], idx[l, h], cfg).k for l, h in data.store.heads())
    assert kept / (2 * 2048) == pytest.approx(1 - sparsity, abs=0.02)


def test_hierarchical_calibration_prunes_half_then_hits_target():
    data = _mixture(L=4096)
    idx = build_index(data.store, [0.01, 0.05], seed=1)
    cfg = calibrate(data.store, idx, LookupConfig(target_sparsity=0.9, coarse_prune=0.5))
    assert len(cfg.level_thresholds) == 1
    Q = data.store.calib_queries
    coarse_kept = kept = 0
    for l, h in data.store.heads():
        sel = select_prefill(Q[l, h], idx[l, h], cfg)
        kept += sel.k
        coarse = idx[l, h].levels[0]
        s = np.mean([score_clusters(q, coarse).scores for q in Q[l, h]], axis=0)
        coarse_kept += coarse.key_weight[s > cfg.level_thresholds[0]].sum()
    assert coarse_kept / (2 * 4096) == pytest.approx(0.5, abs=0.1)
    assert kept / (2 * 4096) == pytest.approx(0.1, abs=0.03)


def test_calibration_errors():
    data = _mixture(L=256, window=50)
    idx = build_index(data.store, [0.05])
    with pytest.raises(CalibrationError):
        calibrate(data.store, idx, LookupConfig(calib_window=256))
    bare = KeyStore(data.store.keys, data.store.values)
    with pytest.raises(CalibrationError):
        calibrate_threshold(bare, idx, LookupConfig(calib_window=50))


def test_config_validation_and_roundtrip():
    cfg = LookupConfig(T=0.01, level_thresholds=[0.002], target_sparsity=0.8)
    assert LookupConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.thresholds_for(2) == [0.002, 0.01]
    with pytest.raises(ValueError):
        cfg.thresholds_for(3)
    for bad in (dict(T=-1.0), dict(T=math.inf), dict(target_sparsity=1.0),
                dict(coarse_prune=-0.1), dict(calib_window=0), dict(level_thresholds=(-1,))):
        with pytest.raises(ValueError):
            LookupConfig(**bad)


def test_budget_arithmetic():
    assert expected_budget(0.9, [0.05]) == 0.125
    assert expected_budget(0.8, [0.05]) == 0.225
    assert expected_budget(0.7, [0.05]) == 0.325
    assert expected_budget(0.9, [0.01, 0.05]) == 0.13
    rng = np.random.default_rng(0)
    level = random_level(rng, 1000, 50, 8)
    sel = select_single_level(rng.normal(size=8), level, 0.0)
    rep = kv_budget(sel, level, 1000)
    assert rep.budget == 1.025 and rep.key_fraction == 1.0 and rep.centroid_fraction == 0.05
    assert kv_budget(sel, None, 1000).budget == 1.0


def test_all_coarse_pruned_skips_fine_level():
    rng = np.random.default_rng(8)
    h = random_two_level(rng, 50, 3, 10, 4)
    sel = select_hierarchical(rng.normal(size=4), h, LookupConfig(T=0.0, level_thresholds=(1.0,)))
    assert sel.k == 0 and sel.comparison_count == 3 and sel.level_candidates == [3]


def test_higher_sparsity_never_lowers_threshold():
    data = _mixture(mode="random")
    idx = build_index(data.store, [0.05], seed=1)
    Ts = [calibrate_threshold(data.store, idx, LookupConfig(target_sparsity=s))
          for s in (0.0, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99)]
    assert all(b >= a for a, b in zip(Ts, Ts[1:]))
