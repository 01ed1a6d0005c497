"""Pixel metrics, rank AUC and the hard clDice connectivity score."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata
from skimage.morphology import skeletonize

log = logging.getLogger(__name__)

THRESHOLD = 0.5
METRIC_KEYS = ("acc", "sen", "spe", "auc", "dice", "iou", "cldice")


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _check_binary(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold


def confusion(pred_binary, gt_binary, mask=None) -> ConfusionCounts:
    pred = _check_binary("prediction", pred_binary)
    gt = _check_binary("ground truth", gt_binary)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask is not None:
        keep = _check_binary("mask", mask)
        pred, gt = pred[keep], gt[keep]
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        log.info("%s has an empty denominator; reported as 1", name)
        return 1.0
    return num / den


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, "acc")


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "sen")


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, "spe")


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice")


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, "iou")


def auc(scores, gt_binary, mask=None) -> float:
    """Rank-based ROC AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    gt = _check_binary("ground truth", gt_binary)
    if s.shape != gt.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {gt.shape}")
    if mask is not None:
        keep = _check_binary("mask", mask)
        s, gt = s[keep], gt[keep]
    s, gt = s.ravel(), gt.ravel()
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative pixel")
    ranks = rankdata(s)
    u = ranks[gt].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def hard_skeleton(mask) -> np.ndarray:
    return skeletonize(np.asarray(mask, dtype=bool))


def cl_dice_metric(pred_binary, gt_binary) -> float:
    """clDice with morphological-thinning skeletons."""
    pred = _check_binary("prediction", pred_binary)
    gt = _check_binary("ground truth", gt_binary)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() and not gt.any():
        return 1.0
    s_p, s_l = hard_skeleton(pred), hard_skeleton(gt)
    n_sp, n_sl = int(s_p.sum()), int(s_l.sum())
    tprec = (s_p & gt).sum() / n_sp if n_sp else 0.0
    tsens = (s_l & pred).sum() / n_sl if n_sl else 0.0
    if tprec + tsens == 0:
        return 0.0
    return float(2 * tprec * tsens / (tprec + tsens))


def evaluate(prob, gt_binary, mask=None, threshold: float = THRESHOLD) -> dict:
    """All metrics for one image; hard metrics use ``prob >= threshold``."""
    prob = np.asarray(prob, dtype=np.float64)
    gt = _check_binary("ground truth", gt_binary)
    pred = binarize(prob, threshold)
    c = confusion(pred, gt, mask)
    try:
        area = auc(prob, gt, mask)
    except UndefinedMetricError:
        log.warning("AUC undefined for a single-class ground truth; reported as NaN")
        area = float("nan")
    if mask is not None:
        keep = _check_binary("mask", mask)
        pred, gt = pred & keep, gt & keep
    return {
        "acc": accuracy(c), "sen": sensitivity(c), "spe": specificity(c), "auc": area,
        "dice": dice(c), "iou": iou(c), "cldice": cl_dice_metric(pred, gt),
        **{k: v for k, v in asdict(c).items()},
    }


def macro_average(rows: list[dict]) -> dict:
    return {k: float(np.nanmean([r[k] for r in rows])) for k in METRIC_KEYS}


def write_metrics(rows: list[dict], json_path, csv_path) -> dict:
    """Per-image rows plus their macro average as JSON and CSV."""
    summary = macro_average(rows) if rows else {}
    with open(json_path, "w") as fh:
        json.dump({"images": rows, "mean": summary}, fh, indent=2)
    fields = ["image_id", *METRIC_KEYS]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return summary
