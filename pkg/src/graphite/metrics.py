"""Pixel-level saliency evaluation: ROC/PR areas, mAP, threshold stability and
robustness, mIoU, balanced accuracy, the CXPS composite and net benefit.

Conventions: a pixel is predicted positive when its score is >= the
threshold; AUROC/AUPRC/BA/ThS/ThR/net benefit pool pixels across cores, while
mAP and mIoU macro-average per core.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

CXPS_WEIGHTS = {
    "map": 0.20,
    "auroc": 0.25,
    "miou": 0.20,
    "ths": 0.10,
    "thr": 0.10,
    "ba": 0.15,
}


@dataclass
class ScoredPixels:
    """Saliency scores in [0, 1] paired with a binary truth mask."""

    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.truth = np.asarray(self.truth).reshape(-1).astype(np.int64)
        if self.scores.size != self.truth.size or self.scores.size < 1:
            raise ValueError("ScoredPixels: scores and truth must have equal length >= 1")
        if self.scores.min() < 0 or self.scores.max() > 1:
            raise ValueError("ScoredPixels: scores must lie in [0, 1]")
        if not set(np.unique(self.truth)) <= {0, 1}:
            raise ValueError("ScoredPixels: truth must be binary")


@dataclass
class ThresholdGrid:
    start: float = 0.01
    stop: float = 0.99
    step: float = 0.01
    operating: float = 0.5

    def __post_init__(self):
        if self.start >= self.stop or self.step <= 0:
            raise ValueError("ThresholdGrid: need start < stop and step > 0")

    def thresholds(self):
        n = int(round((self.stop - self.start) / self.step)) + 1
        return np.round(self.start + self.step * np.arange(n), 10)

    @property
    def span(self):
        t = self.thresholds()
        return float(t[-1] - t[0])


COARSE_GRID = ThresholdGrid(start=0.1, stop=0.9, step=0.1)


@dataclass
class MetricReport:
    method: str
    map: float
    auroc: float
    auprc: float
    miou: float
    ths: float
    thr: float
    ba: float
    cxps: float
    audc: float
    audc_normalized: float
    per_core: dict = field(default_factory=dict)


def pooled(pixel_sets):
    return ScoredPixels(np.concatenate([p.scores for p in pixel_sets]),
                        np.concatenate([p.truth for p in pixel_sets]))


def confusion_at(pixels, t):
    """(TP, FP, TN, FN) with prediction positive at score >= t."""
    if not 0 <= t <= 1:
        raise ValueError("confusion_at: threshold must be in [0, 1]")
    pred = pixels.scores >= t
    truth = pixels.truth == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return tp, fp, tn, fn


def _roc_points(pixels):
    """(FPR, TPR) at every distinct score cut, descending scores."""
    order = np.argsort(-pixels.scores, kind="stable")
    scores = pixels.scores[order]
    truth = pixels.truth[order]
    pos = truth.sum()
    neg = truth.size - pos
    tps = np.cumsum(truth)
    fps = np.cumsum(1 - truth)
    distinct = np.r_[scores[1:] != scores[:-1], True]
    tps, fps = tps[distinct], fps[distinct]
    tpr = np.r_[0.0, tps / pos]
    fpr = np.r_[0.0, fps / neg]
    return fpr, tpr


def auroc(pixels):
    """Trapezoidal area under the ROC curve over distinct score cuts."""
    pos = int(pixels.truth.sum())
    if pos == 0 or pos == pixels.truth.size:
        raise ValueError("auroc: both classes must be present")
    fpr, tpr = _roc_points(pixels)
    return float(_trapezoid(tpr, fpr))


def auroc_rank(pixels):
    """Mann-Whitney rank statistic; the independent oracle for auroc."""
    pos = pixels.scores[pixels.truth == 1]
    neg = pixels.scores[pixels.truth == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc_rank: both classes must be present")
    wins = ties = 0.0
    for s in pos:
        wins += np.sum(s > neg)
        ties += np.sum(s == neg)
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def _pr_points(pixels):
    """(recall, precision) at every distinct score cut, descending scores."""
    order = np.argsort(-pixels.scores, kind="stable")
    scores = pixels.scores[order]
    truth = pixels.truth[order]
    pos = truth.sum()
    tps = np.cumsum(truth)
    fps = np.cumsum(1 - truth)
    distinct = np.r_[scores[1:] != scores[:-1], True]
    tps, fps = tps[distinct], fps[distinct]
    recall = tps / pos
    precision = tps / (tps + fps)
    return recall, precision


def average_precision(pixels):
    """Step-sum AP over descending unique scores."""
    if pixels.truth.sum() == 0:
        raise ValueError("average_precision: no positive pixels")
    recall, precision = _pr_points(pixels)
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def auprc(pixels):
    """Trapezoidal area under the same PR curve as the AP step sum."""
    if pixels.truth.sum() == 0:
        raise ValueError("auprc: no positive pixels")
    recall, precision = _pr_points(pixels)
    recall = np.r_[0.0, recall]
    precision = np.r_[precision[0], precision]
    return float(_trapezoid(precision, recall))


def map_over_cores(per_core_pixels):
    """Unweighted mean of per-core AP; cores without positives are skipped."""
    aps = {}
    for core_id, pixels in per_core_pixels.items():
        if pixels.truth.sum() == 0:
            warnings.warn(f"core {core_id}: no positive pixels, excluded from mAP")
            continue
        aps[core_id] = average_precision(pixels)
    if not aps:
        raise ValueError("map_over_cores: no core has positive pixels")
    return float(np.mean(list(aps.values()))), aps


def f1_curve(pixels, grid=None):
    """F1 at each grid threshold; 0 where precision + recall is 0."""
    grid = grid or ThresholdGrid()
    out = []
    for t in grid.thresholds():
        tp, fp, tn, fn = confusion_at(pixels, t)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return np.array(out)


def ths(f1_values):
    """1 - population stddev / mean of the F1 sweep; 0 when the mean is 0."""
    f1_values = np.asarray(f1_values, dtype=np.float64)
    mu = f1_values.mean()
    if mu == 0:
        return 0.0
    if np.all(f1_values == f1_values[0]):
        return 1.0  # exact: rounding in the mean must not leak into the ratio
    return float(1.0 - f1_values.std() / mu)


def thr(f1_values, grid=None):
    """Threshold span where F1 stays within 95% of its peak."""
    grid = grid or ThresholdGrid()
    f1_values = np.asarray(f1_values, dtype=np.float64)
    if f1_values.size == 0:
        return 0.0
    t = grid.thresholds()
    peak = f1_values.max()
    qualifying = t[f1_values >= 0.95 * peak]
    if qualifying.size == 0:
        return 0.0
    return float(qualifying.max() - qualifying.min())


def iou(pixels, t=0.5):
    tp, fp, tn, fn = confusion_at(pixels, t)
    union = tp + fp + fn
    if union == 0:
        return 1.0  # both masks empty
    return tp / union


def miou(per_core_pixels, t=0.5):
    vals = {cid: iou(p, t) for cid, p in per_core_pixels.items()}
    return float(np.mean(list(vals.values()))), vals


def ba(pixels, t=0.5):
    tp, fp, tn, fn = confusion_at(pixels, t)
    tpr = tp / (tp + fn) if tp + fn else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    return (tpr + tnr) / 2.0


def cxps(components):
    """Weighted composite of mAP, AUROC, mIoU, ThS, ThR and BA."""
    missing = [k for k in CXPS_WEIGHTS if k not in components]
    if missing:
        raise ValueError(f"cxps: missing components {missing}")
    return float(sum(CXPS_WEIGHTS[k] * components[k] for k in CXPS_WEIGHTS))


def net_benefit_curve(pixels, grid=None):
    """Net benefit per threshold plus its area.

    Returns ``(nb, audc, audc_normalized)`` where ``nb`` uses the
    per-pixel-fraction formula TP/Total - FP/Total * t/(1-t), ``audc`` is the
    trapezoidal integral of the count-scaled benefit TP - FP * t/(1-t) over
    the grid, and ``audc_normalized`` the integral of ``nb``.
    """
    grid = grid or ThresholdGrid()
    t = grid.thresholds()
    if t[-1] >= 1.0:
        raise ValueError("net_benefit_curve: grid must stay below 1")
    total = pixels.scores.size
    nb = np.empty_like(t)
    scaled = np.empty_like(t)
    for i, ti in enumerate(t):
        tp, fp, tn, fn = confusion_at(pixels, ti)
        penalty = ti / (1.0 - ti)
        scaled[i] = tp - fp * penalty
        nb[i] = scaled[i] / total
    audc = float(_trapezoid(scaled, t))
    audc_normalized = float(_trapezoid(nb, t))
    return nb, audc, audc_normalized


def evaluate_method(method, per_core_pixels, grid=None, operating=None):
    """Full MetricReport for one saliency method."""
    grid = grid or ThresholdGrid()
    operating = grid.operating if operating is None else operating
    pool = pooled(list(per_core_pixels.values()))
    map_val, per_core_ap = map_over_cores(per_core_pixels)
    miou_val, per_core_iou = miou(per_core_pixels, operating)
    f1 = f1_curve(pool, grid)
    components = {
        "map": map_val,
        "auroc": auroc(pool),
        "miou": miou_val,
        "ths": ths(f1),
        "thr": thr(f1, grid),
        "ba": ba(pool, operating),
    }
    nb, audc, audc_norm = net_benefit_curve(pool, grid)
    return MetricReport(
        method=method,
        map=map_val,
        auroc=components["auroc"],
        auprc=auprc(pool),
        miou=miou_val,
        ths=components["ths"],
        thr=components["thr"],
        ba=components["ba"],
        cxps=cxps(components),
        audc=audc,
        audc_normalized=audc_norm,
        per_core={"ap": per_core_ap, "iou": per_core_iou},
    )


def compare_methods(reports):
    """Rank by CXPS descending, ties by AUROC then method name."""
    if not reports:
        raise ValueError("compare_methods: need at least one report")
    return sorted(reports, key=lambda r: (-r.cxps, -r.auroc, r.method))


TABLE_COLUMNS = ["Method", "mAP", "AUROC", "AUPRC", "mIoU", "ThS", "ThR",
                 "BA", "CXPS", "AUDC"]


def write_comparison_csv(reports, path):
    """Comparison table in the published column order, ranked."""
    rows = compare_methods(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for r in rows:
            writer.writerow([r.method] + [f"{v:.6f}" for v in (
                r.map, r.auroc, r.auprc, r.miou, r.ths, r.thr, r.ba,
                r.cxps, r.audc)])


def write_curves_csv(pixels, grid, prefix):
    """ROC, PR, F1-vs-threshold and NB-vs-threshold as (x, y) CSV series."""
    fpr, tpr = _roc_points(pixels)
    _write_xy(f"{prefix}_roc.csv", "fpr", "tpr", fpr, tpr)
    recall, precision = _pr_points(pixels)
    _write_xy(f"{prefix}_pr.csv", "recall", "precision", recall, precision)
    t = grid.thresholds()
    _write_xy(f"{prefix}_f1.csv", "threshold", "f1", t, f1_curve(pixels, grid))
    nb, _, _ = net_benefit_curve(pixels, grid)
    _write_xy(f"{prefix}_nb.csv", "threshold", "net_benefit", t, nb)


def _write_xy(path, xname, yname, xs, ys):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([xname, yname])
        for x, y in zip(xs, ys):
            writer.writerow([f"{x:.10g}", f"{y:.10g}"])
