"""Checkpoint evaluation: main-path predictions against analytic labels."""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from tpmtl import autodiff as ad
from tpmtl.metrics import MetricReport, boundary_f1, mean_angular_error, miou, rmse_depth
from tpmtl.mtl import MultiTaskModel, batch_images, forward_main
from tpmtl.renderer import post_activate
from tpmtl.scenes import SampleRecord


def predict_main(model: MultiTaskModel, records: List[SampleRecord],
                 batch_size: int = 8) -> Dict[str, np.ndarray]:
    """Post-activated dense predictions, stacked (N, H, W, D) per task."""
    model.set_mode("eval")
    chunks: Dict[str, List[np.ndarray]] = {t.name: [] for t in model.tasks}
    for start in range(0, len(records), batch_size):
        part = records[start:start + batch_size]
        preds = forward_main(model, batch_images(part))
        for t in model.tasks:
            arr = ad.permute(preds[t.name], (0, 2, 3, 1))
            chunks[t.name].append(post_activate(t, arr).data)
    return {name: np.concatenate(parts) for name, parts in chunks.items()}


def evaluate_records(model: MultiTaskModel, records: List[SampleRecord],
                     k_classes: int, config_digest: str = "") -> MetricReport:
    preds = predict_main(model, records)
    report = MetricReport(sample_count=len(records), config_digest=config_digest)
    if "segmentation" in preds:
        pred_cls = preds["segmentation"].argmax(axis=-1)
        gt = np.stack([r.seg for r in records])
        report.segmentation_miou = miou(pred_cls, gt, k_classes)
    if "depth" in preds:
        gt = np.stack([r.depth for r in records])
        report.depth_rmse = rmse_depth(preds["depth"][..., 0], gt)
    if "normal" in preds:
        gt = np.stack([r.normal for r in records])
        report.normal_mean_err_deg = mean_angular_error(preds["normal"], gt)
    if "boundary" in preds:
        report.boundary_max_f1 = boundary_f1(
            [p[..., 0] for p in preds["boundary"]],
            [r.boundary for r in records])
    report.validate()
    return report
