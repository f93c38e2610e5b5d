"""Keypoint evaluation: OKS-based AP (single instance per image), PCK and confidence ranking quality."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_KAPPA = 0.1
PCK_ALPHA = 0.1
BOX_PAD = 0.1  # per side, as a fraction of the tight box extent


def oks(pred, gt, visibility, scale, kappas):
    """Mean over visible keypoints of exp(-d^2 / (2 scale^2 kappa^2)); 0 if none visible."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    kappas = np.broadcast_to(np.asarray(kappas, dtype=np.float64), vis.shape)
    if not vis.any():
        return 0.0
    d2 = ((pred - gt) ** 2).sum(axis=-1)
    e = np.exp(-d2[vis] / (2.0 * scale**2 * kappas[vis] ** 2))
    return float(e.mean())


def instance_scale(gt, visibility, pad=BOX_PAD):
    """sqrt of the area of the padded tight box around visible keypoints (extents floored at 1 px)."""
    pts = np.asarray(gt, dtype=np.float64)[np.asarray(visibility, dtype=bool)]
    if len(pts) == 0:
        return 1.0
    w, h = pts.max(axis=0) - pts.min(axis=0)
    w = max(w, 1.0) * (1 + 2 * pad)
    h = max(h, 1.0) * (1 + 2 * pad)
    return float(np.sqrt(w * h))


def precision_recall_ap(scores, is_tp, num_gt):
    """All-point interpolated AP of a score-ranked list (stable order on ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if num_gt == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    n = np.arange(1, len(order) + 1)
    precision = tp / n
    recall = tp / num_gt
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def average_precision(scores, oks_values, thresholds=OKS_THRESHOLDS):
    """Per-threshold AP and their mean. One prediction and one ground truth per image."""
    oks_values = np.asarray(oks_values, dtype=np.float64)
    per = {t: precision_recall_ap(scores, oks_values >= t, len(oks_values)) for t in thresholds}
    return float(np.mean(list(per.values()))), per


def pck(pred, gt, visibility, radius):
    vis = np.asarray(visibility, dtype=bool)
    if not vis.any():
        return 0.0
    d = np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(gt, np.float64), axis=-1)
    return float((d[vis] <= radius).mean())


def confidence_calibration(conf, correct):
    """P(conf of a random correct keypoint > conf of a random incorrect one), ties count 1/2.

    Returns None when either class is empty (undefined).
    """
    conf = np.asarray(conf, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    n_pos = int(correct.sum())
    n_neg = correct.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(conf)  # average ranks handle ties
    u = ranks[correct].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    ap: float
    ap50: float
    ap75: float
    pck: float
    calib_auc: float | None
    per_threshold: dict = field(default_factory=dict)

    def rows(self):
        fmt = lambda v: "undefined" if v is None else f"{v:.6f}"
        out = [("ap", fmt(self.ap)), ("ap50", fmt(self.ap50)), ("ap75", fmt(self.ap75)),
               ("pck", fmt(self.pck)), ("calib_auc", fmt(self.calib_auc))]
        out += [(f"ap@{t:.2f}", fmt(v)) for t, v in self.per_threshold.items()]
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def summary(self):
        calib = "undefined" if self.calib_auc is None else f"{self.calib_auc:.4f}"
        return (f"AP {self.ap:.4f} | AP50 {self.ap50:.4f} | AP75 {self.ap75:.4f} | "
                f"PCK@{PCK_ALPHA} {self.pck:.4f} | calibration AUC {calib}")


def evaluate(pred, conf, bbox_scores, gt, visibility, image_size, kappa=DEFAULT_KAPPA, alpha=PCK_ALPHA):
    """Full report for N single-person images.

    pred, gt: (N, K, 2) image pixels; conf, visibility: (N, K); bbox_scores: (N,).
    """
    from .heatmaps import instance_score

    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    n, k, _ = gt.shape
    kappas = np.full(k, kappa)
    oks_values = np.array([oks(pred[i], gt[i], vis[i], instance_scale(gt[i], vis[i]), kappas) for i in range(n)])
    scores = instance_score(conf, bbox_scores)
    ap, per = average_precision(scores, oks_values)
    radius = alpha * max(image_size)
    dist = np.linalg.norm(pred - gt, axis=-1)
    correct = dist <= radius
    return MetricsReport(
        ap=ap,
        ap50=per[0.5],
        ap75=per[0.75],
        pck=pck(pred, gt, vis, radius),
        calib_auc=confidence_calibration(np.asarray(conf)[vis], correct[vis]),
        per_threshold=per,
    )
