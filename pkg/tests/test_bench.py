import json
import math

import numpy as np
import pytest

from clusterattn.attention import attention_scores
from clusterattn.bench.analysis import oracle_compare, skewness, skewness_head
from clusterattn.bench.complexity import complexity_sweep, dense_point, hierarchical_point, single_level_point
from clusterattn.bench.report import CSV_COLUMNS, write_csv, write_json
from clusterattn.bench.synthetic import SyntheticSpec, gen_synthetic, generate, generate_tree, tensor_paths
from clusterattn.clustering import build_index
from clusterattn.kvstore import KeyStore, load_tensors
from clusterattn.lookup import LookupConfig, calibrate


def test_same_seed_same_bytes(tmp_path):
    spec = SyntheticSpec(L=512, d=16, num_heads=2, seed=9)
    gen_synthetic(spec, tmp_path / "a")
    gen_synthetic(spec, tmp_path / "b")
    for x, y in zip(tensor_paths(tmp_path / "a"), tensor_paths(tmp_path / "b")):
        assert x.read_bytes() == y.read_bytes()
    store = load_tensors(*tensor_paths(tmp_path / "a"))
    assert store == generate(spec).store
    assert json.loads(tensor_paths(tmp_path / "a")[0].read_text())["synthetic"]["seed"] == 9


def test_spec_validation():
    for bad in (dict(components=0), dict(separation=0.0), dict(sigma=-1.0), dict(query_mode="x")):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad)


def test_separation_and_aligned_top_keys():
    data = generate(SyntheticSpec(L=4096, d=64, num_heads=2, components=10, separation=10.0, sigma=1.0))
    mu = data.means[0, 0]
    gaps = np.linalg.norm(mu[:, None] - mu[None], axis=2)[~np.eye(10, dtype=bool)]
    assert gaps.min() >= 10.0 - 1e-9
    qs, comps = data.queries(200, seed=1)
    hits = 0
    for (l, h) in data.store.heads():
        K = data.store.keys[l, h]
        for q, g in zip(qs[l, h], comps[l, h]):
            top = np.argsort(-attention_scores(q, K))[: math.ceil(0.01 * 4096)]
            hits += np.all(data.labels[l, h][top] == g)
    assert hits / 400 >= 0.99


def test_degenerate_components_give_perfect_recall():
    data = generate(SyntheticSpec(L=1000, d=16, num_heads=1, components=5, sigma=1e-6, calib_window=50))
    idx = build_index(data.store, [0.05], seed=0)
    cfg = calibrate(data.store, idx, LookupConfig(target_sparsity=0.8, calib_window=50), per_query=True)
    rep = oracle_compare(data.store, idx, cfg)
    # identical keys per component: the centroid pick is exactly the ideal pick
    assert rep.index_recall == 1.0
    assert rep.mass_recall == pytest.approx(rep.ideal_mass_recall, abs=1e-12)
    assert rep.mass_recall > 0.9999


def test_zero_threshold_selects_everything():
    data = generate(SyntheticSpec(L=500, d=16, num_heads=2, calib_window=20))
    idx = build_index(data.store, [0.05], seed=0)
    rep = oracle_compare(data.store, idx, LookupConfig(T=0.0, calib_window=20))
    assert rep.mass_recall == pytest.approx(1.0) and rep.index_recall == 1.0
    assert rep.budget == pytest.approx(1 + 0.025)
    assert rep.max_error_inf < 1e-5


def test_ideal_dominates_centroid_selection():
    data = generate(SyntheticSpec(L=2048, d=32, num_heads=2, query_mode="random", calib_window=60))
    idx = build_index(data.store, [0.05], seed=0)
    cfg = calibrate(data.store, idx, LookupConfig(target_sparsity=0.9, calib_window=60), per_query=True)
    rep = oracle_compare(data.store, idx, cfg)
    for h in rep.heads:
        assert h.ideal_mass_recall >= h.mass_recall
        assert 0 <= h.index_recall <= 1 and 0 <= h.mass_recall <= 1
    assert 0 < rep.budget <= 1
    again = oracle_compare(data.store, idx, cfg)
    assert json.dumps(again.to_dict()) == json.dumps(rep.to_dict())


def test_skewness_examples():
    rng = np.random.default_rng(0)
    L, d = 1000, 8
    flat = KeyStore(np.zeros((1, 1, L, d), np.float32), rng.normal(size=(1, 1, L, d)).astype(np.float32))
    q = np.ones((1, 1, d), np.float32)
    assert skewness(flat, q, 0.01)[0, 0] == pytest.approx(0.01, abs=1e-12)
    K = np.zeros((L, d), np.float32)
    K[17, 0] = 20 * math.sqrt(d)
    assert skewness_head(np.eye(d)[0], K, 0.01) == pytest.approx(1.0, abs=1e-4)
    K = rng.normal(size=(L, d))
    vals = [skewness_head(q[0, 0], K, f) for f in (0.001, 0.01, 0.1, 0.5, 1.0)]
    assert all(b >= a for a, b in zip(vals, vals[1:])) and vals[-1] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        skewness_head(q[0, 0], K, 0.0)


def test_dense_and_single_level_counts():
    assert dense_point(2048).mean_comparisons * 2 == dense_point(4096).mean_comparisons
    a = single_level_point(2048, test=20)
    b = single_level_point(4096, test=20)
    assert a.centroids_total == math.ceil(0.05 * 2048)
    for p in (a, b):
        assert p.mean_comparisons == pytest.approx(p.centroids_total + p.mean_k)
        assert p.mean_k / p.L == pytest.approx(0.1, abs=0.02)
    assert b.mean_comparisons / a.mean_comparisons == pytest.approx(2.0, abs=0.05)


def test_hierarchical_counts_grow_additively():
    a = hierarchical_point(4096, leaf_size=256, test=20)
    b = hierarchical_point(8192, leaf_size=256, test=20)
    assert b.levels == a.levels + 1
    assert a.candidates_per_level == [2.0] * a.levels and a.mean_k == 256
    assert b.mean_comparisons - a.mean_comparisons == 2.0


def test_sweep_validation_and_rows(tmp_path):
    with pytest.raises(ValueError):
        complexity_sweep([4096, 2048])
    with pytest.raises(ValueError):
        complexity_sweep([2048], modes=["magic"])
    pts = complexity_sweep([2048, 4096], modes=("dense",))
    rows = [p.to_row() for p in pts]
    path = write_csv("bench-complexity", rows, tmp_path / "c.csv")
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS["bench-complexity"])
    j = json.loads(write_json({"rows": rows, "x": np.float32(1.5)}, tmp_path / "c.json").read_text())
    assert j["schema_version"] == 1 and j["x"] == 1.5


def test_tree_generator_shape_and_gap():
    t = generate_tree(2048, d=32, leaf_size=256, seed=1)
    assert t.depth == 3 and t.keys.shape == (2048, 32)
    assert np.bincount(t.leaf_of_key).tolist() == [256] * 8
    with pytest.raises(ValueError):
        generate_tree(3000, leaf_size=256)
