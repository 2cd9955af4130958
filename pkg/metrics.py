"""
Depth Metrics
Median-scaled evaluation with depth caps and the seven standard error measures.
"""
import json
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Sequence

import numpy as np


class MetricsError(ValueError):
    """Evaluation set is empty or degenerate."""


@dataclass
class EvalConfig:
    max_depth: float = 40.0
    min_depth: float = 1e-3
    median_scaling: bool = True

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise MetricsError(
                f"Depth caps must satisfy 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    count: int = 0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        """One `key value` line per metric."""
        return "\n".join(f"{f.name} {getattr(self, f.name)}" for f in fields(self)) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def summary(self) -> str:
        return (f"abs_rel {self.abs_rel:.4f} | sq_rel {self.sq_rel:.4f} | rmse {self.rmse:.4f} | "
                f"rmse_log {self.rmse_log:.4f} | d1 {self.delta1:.4f} | d2 {self.delta2:.4f} | "
                f"d3 {self.delta3:.4f}")


METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


def lower_median(values: np.ndarray) -> float:
    """Median taking the lower-middle element for even sizes."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise MetricsError("median of an empty set")
    return float(values[(values.size - 1) // 2])


def median_scale_factor(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    selected = gt > 0
    if valid is not None:
        selected &= np.asarray(valid) > 0
    if not np.any(selected):
        raise MetricsError("median_scale: no valid pixels with positive ground truth")
    pred_median = lower_median(pred[selected])
    if pred_median == 0:
        raise MetricsError("median_scale: median prediction is zero")
    return lower_median(gt[selected]) / pred_median


def median_scale(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Scale the prediction so its median over the valid set matches ground truth."""
    return np.asarray(pred, dtype=np.float64) * median_scale_factor(pred, gt, valid)


def compute_errors(gt: np.ndarray, pred: np.ndarray) -> MetricsReport:
    """Computation of error metrics between predicted and ground truth depths"""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    thresh = np.maximum((gt / pred), (pred / gt))
    a1 = (thresh < 1.25).mean()
    a2 = (thresh < 1.25 ** 2).mean()
    a3 = (thresh < 1.25 ** 3).mean()

    rmse = np.sqrt(((gt - pred) ** 2).mean())
    rmse_log = np.sqrt(((np.log(gt) - np.log(pred)) ** 2).mean())
    abs_rel = np.mean(np.abs(gt - pred) / gt)
    sq_rel = np.mean(((gt - pred) ** 2) / gt)

    return MetricsReport(float(abs_rel), float(sq_rel), float(rmse), float(rmse_log),
                         float(a1), float(a2), float(a3), count=int(gt.size))


def evaluate(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None,
             cfg: Optional[EvalConfig] = None) -> MetricsReport:
    """
    Evaluate one depth prediction against ground truth.

    Args:
        pred: Predicted depth
        gt: Ground-truth depth (same shape)
        valid: Optional mask of pixels with usable ground truth
        cfg: Depth caps and scaling switch

    Returns:
        MetricsReport over pixels with min_depth < gt ≤ max_depth
    """
    cfg = cfg or EvalConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricsError(f"evaluate: prediction {pred.shape} and ground truth {gt.shape} differ")
    selected = (gt > cfg.min_depth) & (gt <= cfg.max_depth)
    if valid is not None:
        selected &= np.asarray(valid) > 0
    if not np.any(selected):
        raise MetricsError("evaluate: evaluation set is empty after depth caps")
    pred_sel, gt_sel = pred[selected], gt[selected]
    if cfg.median_scaling:
        pred_sel = median_scale(pred_sel, gt_sel)
    pred_sel = np.clip(pred_sel, cfg.min_depth, cfg.max_depth)
    return compute_errors(gt_sel, pred_sel)


def reduce_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average reports weighted by their pixel counts."""
    total = sum(r.count for r in reports)
    if total == 0:
        raise MetricsError("reduce_reports: no evaluated pixels")
    values = {name: sum(getattr(r, name) * r.count for r in reports) / total for name in METRIC_NAMES}
    return MetricsReport(count=total, **values)
