"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration, 3 data-format error,
4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..attention import output_error_bound_check
from ..clustering import build_index
from ..errors import (
    CalibrationError,
    DimensionError,
    FormatError,
    InvariantError,
    NoKeysAttendedError,
)
from ..kvstore import load_index, load_tensors, save_index
from ..lookup import LookupConfig, calibrate, kv_budget, select_heads
from . import plotting
from .analysis import oracle_compare, skewness
from .complexity import MODES, complexity_sweep
from .report import write_csv, write_json
from .synthetic import SyntheticSpec, gen_synthetic, tensor_paths

log = logging.getLogger("clusterattn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4

TIMING_NOTE = (
    "CPU timings from a NumPy reference path; not comparable to GPU kernel latencies"
)


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def _load_store(prefix):
    header, blob = tensor_paths(prefix)
    return load_tensors(header, blob)


def _load_cfg(path) -> LookupConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"threshold file is not valid JSON: {exc}") from exc
    return LookupConfig.from_dict(data)


def _queries(args, store) -> np.ndarray:
    """Query tensor of shape (layers, heads, n, d)."""
    if getattr(args, "queries_npy", None):
        q = np.load(args.queries_npy)
    else:
        q = store.calib_queries
    if q is None:
        raise CalibrationError("no queries: the tensor blob has no calib_queries; pass --queries-npy")
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 4 or q.shape[:2] != (store.num_layers, store.num_heads) or q.shape[3] != store.head_dim:
        raise DimensionError(f"queries of shape {q.shape} do not fit the store")
    return q


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        L=args.L, d=args.d, num_heads=args.heads, num_layers=args.layers,
        components=args.components, separation=args.separation, sigma=args.sigma,
        query_mode=args.query_mode, calib_window=args.calib_window,
        query_gain=args.query_gain, seed=args.seed,
    )
    gen_synthetic(spec, args.out)
    header, blob = tensor_paths(args.out)
    print(f"wrote {header} and {blob}")
    return EXIT_OK


def cmd_build_index(args) -> int:
    store = _load_store(args.tensors)
    index = build_index(store, args.fractions, seed=args.seed, threads=args.threads,
                        centroid=args.centroid)
    save_index(index, args.out)
    counts = index[0, 0].counts
    print(f"wrote {args.out}: {index.num_layers}x{index.num_heads} heads, centroids per level {counts}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    store = _load_store(args.tensors)
    index = load_index(args.index)
    base = LookupConfig(
        target_sparsity=args.sparsity, coarse_prune=args.coarse_prune,
        calib_window=args.calib_window, scale_logits=not args.no_scale,
    )
    q = _queries(args, store) if args.queries_npy else None
    cfg = calibrate(store, index, base, queries=q, per_query=args.per_query)
    payload = {**cfg.to_dict(), "per_query": args.per_query}
    write_json(payload, args.out)
    rows = [{"level": i + 1, "threshold": t} for i, t in enumerate(cfg.level_thresholds)]
    rows.append({"level": len(rows) + 1, "threshold": cfg.T})
    write_csv("calibrate", rows, Path(args.out).with_suffix(".csv"))
    print(f"T = {cfg.T:.6g}; coarse thresholds {list(cfg.level_thresholds)}")
    return EXIT_OK


def _select(args, store, index, cfg):
    q = _queries(args, store)
    if args.prefill:
        block = q
        mode = "auto"
    else:
        block = q[:, :, args.query_row, :]
        mode = "generation" if index[0, 0].depth == 1 else "hierarchical"
    return block, select_heads(block, index, cfg, mode=mode)


def cmd_lookup(args) -> int:
    store = _load_store(args.tensors)
    index = load_index(args.index)
    cfg = _load_cfg(args.thresholds)
    _, sels = _select(args, store, index, cfg)
    rows = [
        {"layer": l, "head": h, "k": s.k, "clusters": int(s.clusters.size),
         "comparison_count": s.comparison_count, "key_fraction": s.k / store.seq_len}
        for (l, h), s in sels.items()
    ]
    budget = kv_budget(sels, index, store.seq_len)
    out = _out_dir(args)
    write_json({"verb": "lookup", "config": cfg.to_dict(), "budget": budget.to_dict(),
                "heads": rows,
                "selected": {f"{l},{h}": s.indices for (l, h), s in sels.items()}},
               out / "lookup.json")
    write_csv("lookup", rows, out / "lookup.csv")
    print(f"budget {budget.budget:.4f}, keys {budget.selected_keys}, comparisons {budget.comparison_count}")
    return EXIT_OK


def cmd_attend(args) -> int:
    store = _load_store(args.tensors)
    index = load_index(args.index)
    cfg = _load_cfg(args.thresholds)
    block, sels = _select(args, store, index, cfg)
    rows = []
    for (l, h), s in sels.items():
        qs = block[l, h] if block.ndim == 4 else block[l, h][None, :]
        for q in qs:
            row = {"layer": l, "head": h, "loaded_keys": s.k}
            try:
                rep = output_error_bound_check(q, store.keys[l, h], store.values[l, h], s.indices,
                                               cfg.scale_logits, args.block_size)
                row.update(rep.to_dict())
            except NoKeysAttendedError:
                row.update(error_inf=float("nan"), dropped_mass=1.0, bound=float("nan"), holds=False)
            rows.append(row)
    out = _out_dir(args)
    write_json({"verb": "attend", "config": cfg.to_dict(), "block_size": args.block_size,
                "rows": rows}, out / "attend.json")
    write_csv("attend", rows, out / "attend.csv")
    empty = sum(1 for r in rows if r["loaded_keys"] == 0)
    worst = max((r["error_inf"] for r in rows if r["loaded_keys"]), default=float("nan"))
    print(f"max |sparse - dense| = {worst:.3e}; heads with no keys attended: {empty}")
    return EXIT_OK


def cmd_oracle_compare(args) -> int:
    store = _load_store(args.tensors)
    index = load_index(args.index)
    cfg = _load_cfg(args.thresholds)
    report = oracle_compare(store, index, cfg, _queries(args, store), args.block_size)
    out = _out_dir(args)
    rows = [h.to_row() for h in report.heads]
    write_json(report.to_dict(), out / "oracle.json")
    write_csv("oracle-compare", rows, out / "oracle.csv")
    plotting.plot_recall(rows, out / "oracle_recall.png")
    print(f"mass recall {report.mass_recall:.4f} (ideal {report.ideal_mass_recall:.4f}), "
          f"budget {report.budget:.4f}")
    return EXIT_OK


def cmd_analyze_skew(args) -> int:
    store = _load_store(args.tensors)
    q = _queries(args, store)[:, :, args.query_row, :]
    scores = skewness(store, q, args.top_frac, scale=not args.no_scale)
    rows = [{"layer": l, "head": h, "top_frac": args.top_frac, "cumulative_score": scores[l, h]}
            for l, h in store.heads()]
    out = _out_dir(args)
    write_json({"verb": "analyze-skew", "top_frac": args.top_frac, "scores": scores}, out / "skew.json")
    write_csv("analyze-skew", rows, out / "skew.csv")
    plotting.plot_skewness(scores, args.top_frac, out / "skew.png")
    print(f"cumulative top-{args.top_frac:g} score: min {scores.min():.4f}, max {scores.max():.4f}")
    return EXIT_OK


def cmd_bench_complexity(args) -> int:
    points = complexity_sweep(
        args.L, modes=args.modes, seed=args.seed, leaf_size=args.leaf_size,
        test=args.queries, d=args.d,
    )
    rows = [p.to_row() for p in points]
    out = _out_dir(args)
    payload = {"verb": "bench-complexity", "points": rows}
    if args.timings:
        payload["timings"] = [{"mode": p.mode, "L": p.L, **p.timings} for p in points]
        payload["meta"] = {"timing_note": TIMING_NOTE}
    write_json(payload, out / "complexity.json")
    write_csv("bench-complexity", rows, out / "complexity.csv")
    plotting.plot_complexity(rows, out / "complexity.png")
    for r in rows:
        print(f"{r['mode']:>12} L={r['L']:>8} comparisons/token={r['mean_comparisons']:.1f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default(0))
        g.add_argument("--threads", type=int, default=default(1))
        g.add_argument("--config", default=default(None),
                       help="JSON file of option defaults for the verb")
        g.add_argument("-v", "--verbose", action="store_true", default=default(False))
        return g

    # global flags may come before or after the verb; the copy on each verb
    # suppresses its defaults so it does not clobber values given earlier
    common = globals_(lambda _: argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="clusterattn", parents=[globals_(lambda v: v)],
                                description="Centroid-indexed sparse attention toolkit")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    def data_args(sp, index=True, thresholds=True):
        sp.add_argument("--tensors", required=True, help="prefix of <prefix>.json/<prefix>.bin")
        if index:
            sp.add_argument("--index", required=True)
        if thresholds:
            sp.add_argument("--thresholds", required=True, help="JSON written by calibrate")
        sp.add_argument("--queries-npy", help=".npy of shape (layers, heads, n, d)")

    sp = verb("gen-synthetic", cmd_gen_synthetic, "write a synthetic mixture context")
    sp.add_argument("--out", required=True, help="output prefix")
    sp.add_argument("--L", type=int, default=4096)
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--heads", type=int, default=2)
    sp.add_argument("--layers", type=int, default=1)
    sp.add_argument("--components", type=int, default=10)
    sp.add_argument("--separation", type=float, default=10.0)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--query-mode", choices=["aligned", "random"], default="aligned")
    sp.add_argument("--calib-window", type=int, default=100)
    sp.add_argument("--query-gain", type=float, default=12.0)

    sp = verb("build-index", cmd_build_index, "cluster keys offline")
    sp.add_argument("--tensors", required=True)
    sp.add_argument("--fractions", type=_floats, default=[0.05],
                    help="centroid fractions of L, coarsest first (e.g. 0.01,0.05)")
    sp.add_argument("--centroid", choices=["raw", "normalized"], default="raw")
    sp.add_argument("--out", required=True)

    sp = verb("calibrate", cmd_calibrate, "fit the global threshold")
    data_args(sp, thresholds=False)
    sp.add_argument("--sparsity", type=float, default=0.9)
    sp.add_argument("--coarse-prune", type=float, default=0.5)
    sp.add_argument("--calib-window", type=int, default=100)
    sp.add_argument("--per-query", action="store_true",
                    help="score each calibration query alone (generation) instead of averaging (prefill)")
    sp.add_argument("--no-scale", action="store_true", help="omit 1/sqrt(d) logit scaling")
    sp.add_argument("--out", required=True)

    for name, func, help_ in (("lookup", cmd_lookup, "select keys for queries"),
                              ("attend", cmd_attend, "sparse attention with error bound check")):
        sp = verb(name, func, help_)
        data_args(sp)
        sp.add_argument("--query-row", type=int, default=-1)
        sp.add_argument("--prefill", action="store_true", help="average scores over all query rows")
        sp.add_argument("--out-dir", default=".")
        if name == "attend":
            sp.add_argument("--block-size", type=int, default=128)

    sp = verb("oracle-compare", cmd_oracle_compare, "compare against dense and ideal lookup")
    data_args(sp)
    sp.add_argument("--block-size", type=int, default=128)
    sp.add_argument("--out-dir", default=".")

    sp = verb("analyze-skew", cmd_analyze_skew, "cumulative top-fraction attention per head")
    data_args(sp, index=False, thresholds=False)
    sp.add_argument("--top-frac", type=float, default=0.01)
    sp.add_argument("--query-row", type=int, default=-1)
    sp.add_argument("--no-scale", action="store_true")
    sp.add_argument("--out-dir", default=".")

    sp = verb("bench-complexity", cmd_bench_complexity, "comparison counts versus context length")
    sp.add_argument("--L", type=_ints, default=[65536, 131072, 262144, 524288])
    sp.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m],
                    default=["dense", "hierarchical"])
    sp.add_argument("--leaf-size", type=int, default=256)
    sp.add_argument("--queries", type=int, default=100)
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--timings", action="store_true", help="include wall-clock timings")
    sp.add_argument("--out-dir", default=".")
    return p


def _apply_config(parser, argv):
    """Re-parse with defaults taken from --config."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a JSON object")
    known = vars(args)
    unknown = [k for k in overrides if k.replace("-", "_") not in known]
    if unknown:
        raise ConfigError(f"unknown config keys for {args.verb}: {unknown}")
    sub = parser._subparsers._group_actions[0].choices[args.verb]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "modes", None) is not None:
        bad = set(args.modes) - set(MODES)
        if bad:
            print(f"error: unknown modes {sorted(bad)}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (FormatError, DimensionError, CalibrationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
