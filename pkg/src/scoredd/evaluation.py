"""AUROC at image and pixel level, NFE/runtime reports and results CSVs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np
from scipy.stats import rankdata

from .detector import image_score

RESULT_COLUMNS = ("dataset", "config_id", "image_auroc", "pixel_auroc", "total_nfe", "wall_ms")


class UndefinedMetricError(ValueError):
    """AUROC needs at least one positive and one negative example."""


@dataclass
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")


def auroc(scores, labels=None) -> float:
    """Mann-Whitney AUROC with midranks for ties.

    Accepts a :class:`LabeledScores` or ``(scores, labels)``.
    """
    ls = scores if isinstance(scores, LabeledScores) else LabeledScores(scores, labels)
    pos = ls.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC undefined with {n_pos} positives and {n_neg} negatives")
    if not np.all(np.isfinite(ls.scores)):
        raise ValueError("scores must be finite")
    ranks = rankdata(ls.scores)  # average method = midranks
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    """AUROC over all pixels of all images pooled together."""
    maps = list(maps)
    masks = list(masks)
    if len(maps) != len(masks):
        raise ValueError("need one mask per map")
    for m, k in zip(maps, masks):
        if np.shape(m) != np.shape(k):
            raise ValueError(f"map shape {np.shape(m)} differs from mask shape {np.shape(k)}")
    if not maps:
        raise UndefinedMetricError("no pixels")
    s = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    y = np.concatenate([(np.asarray(k) > 0).astype(np.int64).ravel() for k in masks])
    return auroc(s, y)


def image_auroc(maps, image_labels) -> float:
    return auroc([image_score(m) for m in maps], image_labels)


# ----------------------------------------------------------------------------
# reports


@dataclass
class RunRecord:
    config_id: str
    nfe: int
    wall_ms: float
    n_items: int = 1


def nfe_report(runs: Iterable[RunRecord]) -> List[dict]:
    """Aggregate runs by config id, keeping first-seen order."""
    table: dict = {}
    for r in runs:
        row = table.setdefault(r.config_id, {"config_id": r.config_id, "total_nfe": 0, "wall_ms": 0.0, "items": 0})
        row["total_nfe"] += int(r.nfe)
        row["wall_ms"] += float(r.wall_ms)
        row["items"] += int(r.n_items)
    return list(table.values())


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def write_results_csv(path, rows: Sequence[dict], columns=RESULT_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])


def sweep_t_sets(net, spec, x, labels, candidates, combine="feature_product", r=1, mode="ode", seed=0):
    """AUROC of the detector for each candidate ``t_set`` (for picking defaults on held-out data)."""
    from .detector import DetectConfig, detect

    out = []
    for ts in candidates:
        res = detect(net, spec, DetectConfig(ts, r=r, mode=mode, combine=combine, seed=seed), x)
        out.append((tuple(ts), auroc(res.scores, labels)))
    return out
