"""JSON and CSV report emission."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

# CSV columns per verb
CSV_COLUMNS = {
    "lookup": ["layer", "head", "k", "clusters", "comparison_count", "key_fraction"],
    "attend": ["layer", "head", "loaded_keys", "error_inf", "dropped_mass", "bound", "holds"],
    "oracle-compare": [
        "layer", "head", "queries", "mean_k", "index_recall", "mass_recall",
        "ideal_mass_recall", "min_mass_recall", "max_error_inf", "mean_comparisons",
        "empty_selections",
    ],
    "analyze-skew": ["layer", "head", "top_frac", "cumulative_score"],
    "bench-complexity": [
        "mode", "L", "levels", "centroids_total", "candidates_per_level",
        "mean_comparisons", "mean_k", "min_comparisons", "max_comparisons", "queries",
    ],
    "calibrate": ["level", "threshold"],
}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(payload: dict, path) -> Path:
    path = Path(path)
    body = {"schema_version": SCHEMA_VERSION, **_plain(payload)}
    path.write_text(json.dumps(body, indent=2, sort_keys=False) + "\n")
    return path


def write_csv(verb: str, rows: list[dict], path) -> Path:
    path = Path(path)
    cols = CSV_COLUMNS[verb]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(_plain(row))
    return path
