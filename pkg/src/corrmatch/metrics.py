from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import IGNORE


@dataclass
class StepDiagnostics:
    iteration: int
    tau: float
    mask_ratio: float
    mining_ratio: float
    filter_ratio: float
    correct_pseudo_ratio: float
    pixel_accuracy: float


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, K: int) -> np.ndarray:
    """``K x K`` counts, rows = ground truth, columns = prediction; IGNORE gt pixels dropped."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    keep = gt != IGNORE
    return np.bincount(gt[keep] * K + pred[keep], minlength=K * K).reshape(K, K)


def miou(pred: np.ndarray, gt: np.ndarray, K: int) -> float:
    """Mean IoU over classes present in prediction or ground truth.

    Accepts single maps or stacks of maps (the confusion matrix is pooled).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"miou: prediction {pred.shape} vs ground truth {gt.shape}")
    cm = confusion_matrix(pred, gt, K)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        return float("nan")
    return float((inter[present] / union[present]).mean())


def mask_ratio(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    return float(mask.astype(bool).sum() / mask.size)


def mining_ratio(mask: np.ndarray, pseudo: np.ndarray, gt: np.ndarray) -> float:
    """Share of correctly predicted pixels that also pass the confidence filter."""
    correct = np.asarray(pseudo) == np.asarray(gt)
    n = int(correct.sum())
    if n == 0:
        return 0.0
    return float((correct & np.asarray(mask).astype(bool)).sum() / n)


def diagnostic_ratios(mask: np.ndarray, pseudo: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    mask = np.asarray(mask).astype(bool)
    correct = np.asarray(pseudo) == np.asarray(gt)
    total = mask.size
    return {
        "filter_ratio": float(mask.sum() / total),
        "correct_pseudo_ratio": float((mask & correct).sum() / total),
        "pixel_accuracy": float(correct.sum() / total),
    }
