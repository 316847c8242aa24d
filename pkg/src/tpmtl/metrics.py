"""Task metrics: mIoU, depth RMSE, mean angular error, boundary max-F1.

Boundary quality uses a simplified dataset-level protocol: F1 is computed
over a fixed threshold grid {0.05, ..., 0.95} with 1-pixel Chebyshev
matching tolerance and the best value is reported ("odsF-lite").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

BOUNDARY_THRESHOLDS = np.arange(0.05, 0.951, 0.05)


class ValidationError(ValueError):
    """Metric inputs are inconsistent with the declared label space."""


def miou(pred_classes: np.ndarray, gt_classes: np.ndarray, k: int,
         ignore_index: int = 255) -> float:
    """Mean IoU over the classes present in gt; ignore-index pixels drop out."""
    pred = np.asarray(pred_classes).astype(np.int64)
    gt = np.asarray(gt_classes).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValidationError(f"miou: shapes differ, {pred.shape} vs {gt.shape}")
    valid = gt != ignore_index
    observed = np.concatenate([pred[valid], gt[valid]])
    if observed.size and (observed.min() < 0 or observed.max() >= k):
        raise ValidationError(
            f"miou: observed labels span [{observed.min()}, {observed.max()}], "
            f"inconsistent with K={k}")
    ious = []
    for c in range(k):
        gt_c = (gt == c) & valid
        if not gt_c.any():
            continue
        pred_c = (pred == c) & valid
        inter = np.logical_and(gt_c, pred_c).sum()
        union = np.logical_or(gt_c, pred_c).sum()
        ious.append(inter / union)
    return float(np.mean(ious)) if ious else 0.0


def rmse_depth(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"rmse_depth: shapes differ, {pred.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def mean_angular_error(pred_normals: np.ndarray, gt_normals: np.ndarray) -> float:
    """Mean arccos of the clamped dot product, in degrees.

    Inputs are expected unit-normalized; an all-zero prediction dots to 0
    and therefore scores 90 degrees.
    """
    pred = np.asarray(pred_normals, dtype=np.float64)
    gt = np.asarray(gt_normals, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"mean_angular_error: shapes differ, {pred.shape} vs {gt.shape}")
    dots = np.clip((pred * gt).sum(axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())


def _dilate(mask: np.ndarray, tol: int) -> np.ndarray:
    """Chebyshev dilation by tol pixels."""
    if tol <= 0:
        return mask
    padded = np.pad(mask, tol)
    out = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    for dy in range(2 * tol + 1):
        for dx in range(2 * tol + 1):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def boundary_f1(pred_prob, gt_binary, tol: int = 1,
                thresholds: Sequence[float] = BOUNDARY_THRESHOLDS) -> float:
    """Best dataset-wide F1 over the threshold grid with tol-pixel matching.

    Accepts single maps or lists of maps; precision counts predicted edge
    pixels within tol of any ground-truth edge, recall the converse. F1 is
    0 by definition when nothing is predicted or nothing is there.
    """
    preds = pred_prob if isinstance(pred_prob, (list, tuple)) else [pred_prob]
    gts = gt_binary if isinstance(gt_binary, (list, tuple)) else [gt_binary]
    if len(preds) != len(gts):
        raise ValidationError("boundary_f1: sample count mismatch")
    gts = [np.asarray(g) > 0.5 for g in gts]
    gt_dil = [_dilate(g, tol) for g in gts]
    best = 0.0
    for thr in thresholds:
        matched_pred = n_pred = matched_gt = n_gt = 0
        for prob, g, gdil in zip(preds, gts, gt_dil):
            p = np.asarray(prob) >= thr
            n_pred += int(p.sum())
            n_gt += int(g.sum())
            matched_pred += int((p & gdil).sum())
            matched_gt += int((g & _dilate(p, tol)).sum())
        if n_pred == 0 or n_gt == 0:
            continue
        precision = matched_pred / n_pred
        recall = matched_gt / n_gt
        if precision + recall > 0:
            best = max(best, 2 * precision * recall / (precision + recall))
    return best


@dataclass
class MetricReport:
    """Per-task evaluation summary plus provenance."""

    segmentation_miou: Optional[float] = None
    depth_rmse: Optional[float] = None
    normal_mean_err_deg: Optional[float] = None
    boundary_max_f1: Optional[float] = None
    sample_count: int = 0
    config_digest: str = ""
    notes: Dict[str, str] = field(default_factory=dict)

    METRIC_FIELDS = (
        ("segmentation_miou", "Seg mIoU", "up"),
        ("depth_rmse", "Depth RMSE", "down"),
        ("normal_mean_err_deg", "Normal mErr(deg)", "down"),
        ("boundary_max_f1", "Boundary maxF1", "up"),
    )

    def validate(self) -> None:
        if self.segmentation_miou is not None and not 0.0 <= self.segmentation_miou <= 1.0:
            raise ValidationError(f"mIoU out of range: {self.segmentation_miou}")
        if self.depth_rmse is not None and self.depth_rmse < 0.0:
            raise ValidationError(f"negative RMSE: {self.depth_rmse}")
        if self.normal_mean_err_deg is not None and not 0.0 <= self.normal_mean_err_deg <= 180.0:
            raise ValidationError(f"mErr out of range: {self.normal_mean_err_deg}")
        if self.boundary_max_f1 is not None and not 0.0 <= self.boundary_max_f1 <= 1.0:
            raise ValidationError(f"F1 out of range: {self.boundary_max_f1}")

    def to_dict(self) -> dict:
        return {
            "segmentation_miou": self.segmentation_miou,
            "depth_rmse": self.depth_rmse,
            "normal_mean_err_deg": self.normal_mean_err_deg,
            "boundary_max_f1": self.boundary_max_f1,
            "sample_count": self.sample_count,
            "config_digest": self.config_digest,
            "boundary_protocol": "odsF-lite: fixed threshold grid, 1px tolerance",
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'metric':<18}{'value':>12}  direction",
                 "-" * 40]
        for attr, label, direction in self.METRIC_FIELDS:
            val = getattr(self, attr)
            shown = f"{val:.4f}" if val is not None else "-"
            lines.append(f"{label:<18}{shown:>12}  {direction}")
        lines.append("-" * 40)
        lines.append(f"samples: {self.sample_count}   config: {self.config_digest}")
        return "\n".join(lines)
