"""Segmentation metrics: Dice, Jaccard, 95% Hausdorff distance and average surface distance.

Distances are in voxel units with isotropic spacing.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import nets

logger = logging.getLogger(__name__)

UNDEFINED = float("nan")
CSV_FIELDS = ("iteration", "split", "class", "dice", "jaccard", "hd95", "asd")


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    hd95: float
    asd: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {"dice": self.dice, "jaccard": self.jaccard, "hd95": self.hd95, "asd": self.asd}


def overlap_metrics(pred: np.ndarray, truth: np.ndarray, c: int = 1) -> tuple[float, float]:
    """(dice, jaccard) for class ``c``; both empty counts as a perfect match."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p = pred == c
    t = truth == c
    inter = int(np.count_nonzero(p & t))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if total == 0:
        return 1.0, 1.0
    union = total - inter
    return 2.0 * inter / total, inter / union


def surface_voxels(region: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with at least one face-adjacent background neighbour.

    Voxels outside the volume count as background.
    """
    region = np.asarray(region, dtype=bool)
    face = ndimage.generate_binary_structure(region.ndim, 1)
    interior = ndimage.binary_erosion(region, structure=face, border_value=0)
    return np.argwhere(region & ~interior).astype(np.float64)


def nearest_rank_percentile(values: np.ndarray, q: int) -> float:
    """Smallest value with at least q% of the multiset at or below it (integer q)."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, (q * ordered.size + 99) // 100)
    return float(ordered[rank - 1])


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For every point of ``src``, the Euclidean distance to the nearest point of ``dst``."""
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def surface_distances(pred: np.ndarray, truth: np.ndarray, c: int = 1) -> tuple[float, float]:
    """(hd95, asd) for class ``c``; NaN for both when either surface is empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    sp = surface_voxels(pred == c)
    st = surface_voxels(truth == c)
    if len(sp) == 0 or len(st) == 0:
        logger.info("surface distance undefined for class %d (pred surface %d, truth surface %d)", c, len(sp), len(st))
        return UNDEFINED, UNDEFINED
    d_pt = directed_distances(sp, st)
    d_tp = directed_distances(st, sp)
    hd95 = max(nearest_rank_percentile(d_pt, 95), nearest_rank_percentile(d_tp, 95))
    asd = float(np.concatenate([d_pt, d_tp]).mean())
    return hd95, asd


def evaluate_volume(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> MetricsReport:
    """Metrics per foreground class plus their mean (undefined distances excluded)."""
    per_class = {}
    for c in range(1, num_classes):
        dice, jac = overlap_metrics(pred, truth, c)
        hd95, asd = surface_distances(pred, truth, c)
        per_class[c] = {"dice": dice, "jaccard": jac, "hd95": hd95, "asd": asd}
    return MetricsReport(**_average(per_class.values()), per_class=per_class)


def _average(rows) -> dict[str, float]:
    rows = list(rows)
    out = {}
    for key in ("dice", "jaccard", "hd95", "asd"):
        vals = [r[key] for r in rows if not math.isnan(r[key])]
        out[key] = float(np.mean(vals)) if vals else UNDEFINED
    return out


def average_reports(reports: list[MetricsReport]) -> MetricsReport:
    classes = sorted({c for r in reports for c in r.per_class})
    per_class = {c: _average(r.per_class[c] for r in reports if c in r.per_class) for c in classes}
    return MetricsReport(**_average(r.as_row() for r in reports), per_class=per_class)


def evaluate_students(net_a: nets.SegNet, net_b: nets.SegNet, volume: np.ndarray) -> np.ndarray:
    """Argmax of the averaged softmax maps of both students (ties -> lower class).

    ``volume`` is (W, H, D), (C, W, H, D) or (B, C, W, H, D); the result drops
    the batch and channel axes that were added.
    """
    if net_a.num_classes != net_b.num_classes:
        raise ValueError("students disagree on class count")
    x = np.asarray(volume, dtype=np.float64)
    added = 0
    while x.ndim < 5:
        x = x[None]
        added += 1
    with nets.T.no_grad():
        pa = nets.forward(net_a, x).data
        pb = nets.forward(net_b, x).data
    labels = ((pa + pb) / 2.0).argmax(axis=1)
    return labels[0] if added else labels


def write_metrics_csv(path: str | Path, rows: list[dict], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CSV_FIELDS})


def report_rows(iteration: int, split: str, report: MetricsReport) -> list[dict]:
    rows = [{"iteration": iteration, "split": split, "class": "mean", **report.as_row()}]
    for c, vals in sorted(report.per_class.items()):
        rows.append({"iteration": iteration, "split": split, "class": c, **vals})
    return rows
