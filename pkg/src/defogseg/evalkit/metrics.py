"""Confusion matrices, mIoU, PSNR and model evaluation."""

from __future__ import annotations

import math

import numpy as np
import torch

from ..errors import DimensionError, NumericError
from ..fogsim import IGNORE

PSNR_CAP = 100.0


def confusion(pred, gt, num_classes):
    """K x K counts; rows are ground truth, columns predictions. Ignored gt pixels are skipped."""
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    keep = gt != IGNORE
    p, g = pred[keep], gt[keep]
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise DimensionError(f"prediction label outside [0, {num_classes})")
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise DimensionError(f"ground-truth label outside [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def per_class_iou(cm):
    """IoU per class; NaN for classes absent from both prediction and ground truth."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(cm):
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise NumericError("empty confusion matrix")
    return float(np.nanmean(per_class_iou(cm)))


def pixel_accuracy(cm):
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise NumericError("empty confusion matrix")
    return float(np.trace(cm) / cm.sum())


def psnr(a, b, cap=PSNR_CAP):
    """PSNR in dB for [0, 1] rasters. Identical inputs return ``cap``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def psnr_is_capped(value, cap=PSNR_CAP):
    return value >= cap


@torch.no_grad()
def predict(seg, images, batch=25):
    from ..nets import seg_forward
    out = []
    for i in range(0, len(images), batch):
        out.append(seg_forward(seg, images[i:i + batch]).logits.argmax(1))
    return torch.cat(out).numpy()


def evaluate(seg, data, use_clean=False, batch=25):
    """mIoU, per-class IoU and pixel accuracy of ``seg`` on a TensorSet with labels.

    Scores the clean rasters when ``use_clean`` is set, otherwise the foggy ones.
    """
    if data.label is None:
        raise NumericError(f"split {data.split!r} has no labels; load it in evaluation mode")
    images = data.clean if use_clean else data.fog
    pred = predict(seg, images, batch)
    k = seg.arch.num_classes
    cm = confusion(pred, data.label.numpy(), k)
    return {
        "miou": miou(cm),
        "per_class_iou": [None if math.isnan(v) else float(v) for v in per_class_iou(cm)],
        "pixel_accuracy": pixel_accuracy(cm),
        "pixels": int(cm.sum()),
    }
