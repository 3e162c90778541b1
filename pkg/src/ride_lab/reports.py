"""CSV/JSON report writers and the schemas they follow."""

from __future__ import annotations

import csv
import json
import math
import os
from typing import Iterable

CSV_COLUMNS = {
    "metrics": ["epoch", "lr", "loss", "classify", "diversity", "extra"],
    "biasvar": ["class", "n_k", "split", "bias", "variance", "accuracy"],
    "routing_hist": ["split", "experts_used", "fraction"],
    "hardest_negative_hist": ["split", "bin_low", "bin_high", "count"],
}

_SPLIT_NUMBERS = {
    "type": "object",
    "required": ["all", "many", "medium", "few"],
    "properties": {k: {"type": ["number", "null"]} for k in ("all", "many", "medium", "few")},
}

JSON_SCHEMAS = {
    "eval": {
        "type": "object",
        "required": ["accuracy", "hardest_negative", "n_experts_active"],
        "properties": {
            "accuracy": _SPLIT_NUMBERS,
            "hardest_negative": _SPLIT_NUMBERS,
            "n_experts_active": {"type": "integer", "minimum": 1},
        },
    },
    "cost_report": {
        "type": "object",
        "required": ["mean_experts_used", "mean_macs", "relative_cost", "full_ensemble_relative_cost",
                     "threshold", "accuracy_cascade", "accuracy_full_ensemble"],
        "properties": {
            "mean_experts_used": {"type": "number", "minimum": 1},
            "mean_macs": {"type": "number", "minimum": 0},
            "relative_cost": {"type": "number", "minimum": 0},
            "full_ensemble_relative_cost": {"type": "number", "minimum": 0},
            "threshold": {"type": "number"},
            "accuracy_cascade": _SPLIT_NUMBERS,
            "accuracy_full_ensemble": _SPLIT_NUMBERS,
        },
    },
    "biasvar_summary": {
        "type": "object",
        "required": ["method", "n_models", "bias", "variance", "accuracy", "hardest_negative"],
        "properties": {
            "method": {"type": "string"},
            "n_models": {"type": "integer", "minimum": 2},
            "bias": _SPLIT_NUMBERS,
            "variance": _SPLIT_NUMBERS,
            "accuracy": _SPLIT_NUMBERS,
            "hardest_negative": _SPLIT_NUMBERS,
        },
    },
}


def _clean(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if hasattr(v, "item"):
        return _clean(v.item())
    return v


def write_json(obj, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(rows: Iterable[dict], path: str | os.PathLike, kind: str) -> None:
    cols = CSV_COLUMNS[kind]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in cols})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _fmt(v.item())
    return v


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def hist_rows(histograms: dict[str, list[int]]) -> list[dict]:
    rows = []
    for split, counts in histograms.items():
        n = len(counts)
        for i, c in enumerate(counts):
            rows.append({"split": split, "bin_low": i / n, "bin_high": (i + 1) / n, "count": int(c)})
    return rows


def validate_csv(path: str | os.PathLike, kind: str) -> None:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if header != CSV_COLUMNS[kind]:
        raise ValueError(f"{path}: columns {header} != {CSV_COLUMNS[kind]}")


def validate_json(path: str | os.PathLike, kind: str) -> None:
    import jsonschema

    with open(path) as fh:
        jsonschema.validate(json.load(fh), JSON_SCHEMAS[kind])
