"""Saliency evaluation: max F-beta over 255 thresholds, IoU, accuracy.

Thresholds are t_i = i/255 for i = 0..254 and binarization is strict
(pred > t). The F-measure uses beta^2 = 0.3 by default. Conventions for
degenerate counts: empty ground truth with an empty prediction scores 1,
with a non-empty prediction 0; tp = 0 with non-empty ground truth scores 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

N_THRESHOLDS = 255
DEFAULT_BETA_SQ = 0.3

THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricReport:
    max_f_beta: float
    iou: float
    accuracy: float
    curve: tuple[tuple[float, float, float], ...]  # (precision, recall, f) per threshold
    n_images: int


def _as_binary(pred, threshold=None):
    data = pred.data
    if threshold is None:
        return data.astype(bool) if data.dtype == np.uint8 else data > 0.5
    return data > threshold


def confusion(pred, gt) -> ConfusionCounts:
    """Exact pixel counts; foreground (1) is the positive class."""
    p = _as_binary(pred)
    g = gt.data.astype(bool)
    if p.shape != g.shape:
        raise DataError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    tn = int((~p & ~g).sum())
    return ConfusionCounts(tp, fp, fn, tn)


def f_beta(c: ConfusionCounts, beta_sq: float = DEFAULT_BETA_SQ) -> float:
    if c.tp + c.fn == 0:  # empty ground truth
        return 1.0 if c.fp == 0 else 0.0
    if c.tp == 0:
        return 0.0
    p = c.tp / (c.tp + c.fp)
    r = c.tp / (c.tp + c.fn)
    return (1 + beta_sq) * p * r / (beta_sq * p + r)


def _precision_recall(tp, fp, fn):
    # conventions: no predicted positives -> P = 1; empty gt -> R = 1
    p = 1.0 if tp + fp == 0 else tp / (tp + fp)
    r = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return p, r


def _threshold_counts(pred, gt):
    """tp/fp/fn per threshold, vectorized over the 255-threshold grid."""
    p = pred.data.ravel()
    g = gt.data.ravel().astype(bool)
    if pred.data.shape != gt.data.shape:
        raise DataError(f"shape mismatch: pred {pred.data.shape} vs gt {gt.data.shape}")
    binary = p[None, :] > THRESHOLDS[:, None]
    tp = (binary & g[None, :]).sum(axis=1)
    fp = (binary & ~g[None, :]).sum(axis=1)
    fn = int(g.sum()) - tp
    return tp, fp, fn


def max_f_beta(pred, gt, beta_sq: float = DEFAULT_BETA_SQ):
    """Max F over the 255-threshold grid; returns (max value, per-threshold F curve)."""
    tp, fp, fn = _threshold_counts(pred, gt)
    curve = np.array(
        [f_beta(ConfusionCounts(int(t), int(f), int(n), 0), beta_sq)
         for t, f, n in zip(tp, fp, fn)]
    )
    return float(curve.max()), curve


def iou(pred, gt, threshold: float = 0.5) -> float:
    p = _as_binary(pred, threshold)
    g = gt.data.astype(bool)
    if p.shape != g.shape:
        raise DataError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def accuracy(pred, gt, threshold: float = 0.5) -> float:
    p = _as_binary(pred, threshold)
    g = gt.data.astype(bool)
    if p.shape != g.shape:
        raise DataError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return float((p == g).mean())


def evaluate_dataset(preds: dict, gts: dict, mode: str = "dataset-level",
                     beta_sq: float = DEFAULT_BETA_SQ) -> MetricReport:
    """Aggregate metrics over aligned id -> mask dictionaries.

    dataset-level: average precision and recall across images per threshold,
    then F per threshold, then max. per-image: per-image max F, then mean.
    IoU and accuracy are always averaged per image.
    """
    if mode not in ("dataset-level", "per-image"):
        raise DataError(f"unknown aggregation mode {mode!r}")
    for pid in preds:
        if pid not in gts:
            raise DataError(f"id {pid!r} present in predictions but not in ground truth")
    for gid in gts:
        if gid not in preds:
            raise DataError(f"id {gid!r} present in ground truth but not in predictions")
    ids = sorted(preds)
    if not ids:
        raise DataError("no samples to evaluate")

    ious = []
    accs = []
    per_image_max = []
    p_curves = []
    r_curves = []
    for sid in ids:
        pred, gt = preds[sid], gts[sid]
        ious.append(iou(pred, gt))
        accs.append(accuracy(pred, gt))
        tp, fp, fn = _threshold_counts(pred, gt)
        pr = np.array([_precision_recall(int(t), int(f), int(n))
                       for t, f, n in zip(tp, fp, fn)])
        p_curves.append(pr[:, 0])
        r_curves.append(pr[:, 1])
        per_image_max.append(
            max(f_beta(ConfusionCounts(int(t), int(f), int(n), 0), beta_sq)
                for t, f, n in zip(tp, fp, fn))
        )

    p_mean = np.mean(p_curves, axis=0)
    r_mean = np.mean(r_curves, axis=0)
    f_curve = np.where(
        beta_sq * p_mean + r_mean > 0,
        (1 + beta_sq) * p_mean * r_mean / (beta_sq * p_mean + r_mean),
        0.0,
    )
    if mode == "dataset-level":
        max_f = float(f_curve.max())
    else:
        max_f = float(np.mean(per_image_max))
    curve = tuple(
        (float(p), float(r), float(f)) for p, r, f in zip(p_mean, r_mean, f_curve)
    )
    return MetricReport(
        max_f_beta=max_f,
        iou=float(np.mean(ious)),
        accuracy=float(np.mean(accs)),
        curve=curve,
        n_images=len(ids),
    )
