"""AUC, parameter accounting, stage instrumentation and report files."""
from __future__ import annotations

import csv
import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

REPORT_SCHEMA_VERSION = 1


def auc(predictions, labels) -> float:
    """Mann-Whitney AUC; tied predictions count one half (midranks)."""
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if len(pred) != len(y):
        raise DataError("predictions and labels differ in length")
    if np.isnan(pred).any():
        raise DataError("predictions contain NaN")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("undefined AUC: labels contain a single class")
    ranks = rankdata(pred, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def count_params(tables: Iterable[np.ndarray] = (), transforms: Iterable[np.ndarray] | None = None,
                 theta: Iterable[np.ndarray] | None = None) -> int:
    """Stored entries of the embedding tables, plus M and other parameters when given."""
    total = sum(int(t.size) for t in tables)
    if transforms is not None:
        total += sum(int(m.size) for m in transforms)
    if theta is not None:
        total += sum(int(p.size) for p in theta)
    return total


def model_param_count(model, embeddings_only: bool = False) -> int:
    if embeddings_only:
        return count_params(model.tables)
    theta = [p for name, p in model.named_parameters() if not name.startswith(("V/", "M/"))]
    return count_params(model.tables, model.transforms or [], theta)


@dataclass
class MetricsRecord:
    auc: float | None = None
    logloss: float | None = None
    param_count: int = 0
    wall_ms: dict = field(default_factory=dict)
    forward_backward_passes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


class StageTimer:
    """Wall-clock per named stage, in milliseconds."""

    def __init__(self):
        self.wall_ms: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.wall_ms[name] = self.wall_ms.get(name, 0.0) + (time.perf_counter() - t0) * 1e3


def top_fraction_mass(s: np.ndarray, frac: float = 0.1) -> float:
    """Share of total saliency held by the top ``ceil(frac * K)`` slots."""
    flat = np.sort(np.asarray(s, dtype=np.float64).ravel())[::-1]
    if flat.sum() <= 0:
        return 0.0
    k = max(1, int(math.ceil(frac * len(flat) - 1e-12)))
    return float(flat[:k].sum() / flat.sum())


def saliency_histogram(s: np.ndarray, bins: int = 20) -> dict:
    flat = np.asarray(s, dtype=np.float64).ravel()
    hi = float(flat.max()) if flat.size and flat.max() > 0 else 1.0
    counts, edges = np.histogram(flat, bins=bins, range=(0.0, hi))
    return {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}


def build_report(prune_report: dict, metrics: Sequence[dict] = (), bins: int = 20) -> dict:
    """Assemble the summary behind the saliency and searched-dimension plots."""
    for key in ("saliency", "fields", "kappa"):
        if key not in prune_report:
            raise DataError(f"pruning report lacks {key!r}")
    s = np.asarray(prune_report["saliency"], dtype=np.float64)
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kappa": prune_report["kappa"],
        "total_params": prune_report["total_params"],
        "kept_params": prune_report["kept_params"],
        "threshold": prune_report["threshold"],
        "removed_fields": prune_report["removed_fields"],
        "searched_dims": [
            {"field_id": f["field_id"], "n_i": f["n_i"], "d_i": f["d_i"]} for f in prune_report["fields"]
        ],
        "saliency_histogram": saliency_histogram(s, bins),
        "sorted_saliency": np.sort(s.ravel())[::-1].tolist(),
        "top_decile_mass": top_fraction_mass(s, 0.1),
        "auc_vs_params": [
            {"stage": m["stage"], "auc": m.get("auc"), "param_count": m.get("param_count")} for m in metrics
        ],
    }


def write_report(prune_report: dict, metrics: Sequence[dict], out_dir: str | Path) -> dict:
    """Write ``report.json``, ``saliency.csv`` and ``dims.csv`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = build_report(prune_report, metrics)
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    s = np.asarray(prune_report["saliency"], dtype=np.float64)
    kept = {(f["field_id"], j) for f in prune_report["fields"] for j in f["kept_dims"]}
    with open(out / "saliency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field_id", "dim", "s", "kept"])
        for i in range(s.shape[0]):
            fid = prune_report["fields"][i]["field_id"]
            for j in range(s.shape[1]):
                w.writerow([fid, j, repr(float(s[i, j])), int((fid, j) in kept)])
    with open(out / "dims.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field_id", "n_i", "d_i"])
        for f in prune_report["fields"]:
            w.writerow([f["field_id"], f["n_i"], f["d_i"]])
    return rep
