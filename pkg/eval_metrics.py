"""
Segmentation metrics: matched segment IoU, type agreement, primitive
coverage and residual error.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from error_handlers import ValidationError
from hybrid_segmentation import Segmentation
from logger_config import get_logger
from point_cloud import PointCloud
from primitives import PrimitiveParams, TypeLabel, residual_error

logger = get_logger(__name__)

LabelSource = Union[Segmentation, np.ndarray, Sequence[int]]


@dataclass(frozen=True)
class MembershipMatrix:
    """N x K boolean membership, exactly one True per row; column j is segment ``segment_ids[j]``."""
    matrix: np.ndarray
    segment_ids: np.ndarray

    @classmethod
    def from_labels(cls, labels: LabelSource) -> "MembershipMatrix":
        labels = _labels_of(labels)
        ids, inverse = np.unique(labels, return_inverse=True)
        matrix = np.zeros((len(labels), len(ids)), dtype=bool)
        matrix[np.arange(len(labels)), inverse] = True
        return cls(matrix=matrix, segment_ids=ids)

    @property
    def n_segments(self) -> int:
        return self.matrix.shape[1]

    def iou(self, other: "MembershipMatrix") -> np.ndarray:
        """K_self x K_other IoU of every column pair."""
        a = self.matrix.astype(np.int64)
        b = other.matrix.astype(np.int64)
        inter = a.T @ b
        union = a.sum(axis=0)[:, None] + b.sum(axis=0)[None, :] - inter
        return inter / np.maximum(union, 1)


@dataclass
class SegmentMatching:
    """pairs[j] = (pred segment column, gt segment column)."""
    pairs: List[Tuple[int, int]]
    ious: np.ndarray
    n_gt: int

    @property
    def score(self) -> float:
        if self.n_gt == 0:
            return 0.0
        return float(np.sum(self.ious) / self.n_gt)


def _labels_of(source: LabelSource) -> np.ndarray:
    labels = source.labels if isinstance(source, Segmentation) else source
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValidationError("labels must be one integer per point", field="labels")
    return labels.astype(np.int64)


def match_segments(pred: LabelSource, gt: LabelSource) -> SegmentMatching:
    """One-to-one Hungarian matching of predicted to ground-truth segments maximizing summed IoU."""
    pred_labels, gt_labels = _labels_of(pred), _labels_of(gt)
    if len(pred_labels) != len(gt_labels):
        raise ValidationError(f"prediction has {len(pred_labels)} points, ground truth {len(gt_labels)}",
                              field="pred")
    gt_m = MembershipMatrix.from_labels(gt_labels)
    if len(pred_labels) == 0:
        return SegmentMatching(pairs=[], ious=np.empty(0), n_gt=gt_m.n_segments)
    pred_m = MembershipMatrix.from_labels(pred_labels)
    iou = pred_m.iou(gt_m)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return SegmentMatching(pairs=list(zip(rows.tolist(), cols.tolist())), ious=iou[rows, cols],
                           n_gt=gt_m.n_segments)


def seg_iou(pred: LabelSource, gt: LabelSource) -> float:
    """Mean over ground-truth segments of the matched IoU; unmatched segments count 0."""
    return match_segments(pred, gt).score


def type_iou(pred_types: Sequence[Union[TypeLabel, str]], gt_types: Sequence[Union[TypeLabel, str]],
             matching: SegmentMatching) -> float:
    """Fraction of overlapping matched pairs whose primitive types agree (0 with no such pairs).

    The assignment fills every row it can, so disjoint segments may be paired at IoU 0; those are skipped.
    """
    pairs = [pair for pair, iou in zip(matching.pairs, matching.ious) if iou > 0]
    if not pairs:
        return 0.0
    agree = [TypeLabel.parse(pred_types[p]) is TypeLabel.parse(gt_types[g]) for p, g in pairs]
    return float(np.mean(agree))


def p_coverage(cloud: Union[PointCloud, np.ndarray], primitives: Sequence[PrimitiveParams],
               epsilon: float = 0.01) -> float:
    """Fraction of points closer than epsilon to some predicted primitive; 0 without primitives."""
    if not epsilon > 0:
        raise ValidationError("epsilon must be > 0", field="epsilon_coverage")
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    primitives = [p for p in primitives if p is not None]
    if not primitives or len(positions) == 0:
        return 0.0
    nearest = np.min(np.column_stack([p.distance(positions) for p in primitives]), axis=1)
    return float(np.mean(nearest < epsilon))


def res_error(primitives: Sequence[Optional[PrimitiveParams]],
              samples: Sequence[np.ndarray]) -> Tuple[float, float]:
    """
    Residual of each predicted primitive against its ground-truth segment samples.

    Returns:
        (sum over segments, mean over segments); segments without a primitive are skipped
    """
    if len(primitives) != len(samples):
        raise ValidationError("one sample set per primitive is required", field="samples")
    errors = [residual_error(p, s) for p, s in zip(primitives, samples) if p is not None]
    if not errors:
        return 0.0, 0.0
    return float(np.sum(errors)), float(np.mean(errors))


def evaluate(cloud: PointCloud, pred: Segmentation, gt_labels: LabelSource,
             gt_types: Optional[Sequence[Union[TypeLabel, str]]] = None,
             epsilon: float = 0.01) -> Dict[str, Any]:
    """
    Full metric report of a predicted segmentation.

    Args:
        cloud: Evaluated points
        pred: Predicted segmentation with per-segment primitives
        gt_labels: Ground-truth label per point
        gt_types: Ground-truth type per ground-truth segment (in ascending label order)
        epsilon: Coverage threshold

    Returns:
        {seg_iou, type_iou, res_error, res_error_mean, p_coverage, K_pred, K_gt}
    """
    gt = _labels_of(gt_labels)
    matching = match_segments(pred, gt)
    gt_ids = np.unique(gt)

    # residual of each matched prediction on its ground-truth segment
    prims, samples = [], []
    for p, g in matching.pairs:
        prims.append(pred.segments[p].params)
        samples.append(cloud.positions[gt == gt_ids[g]])
    total, mean = res_error(prims, samples)

    report = {
        "seg_iou": matching.score,
        "type_iou": None,
        "res_error": total,
        "res_error_mean": mean,
        "p_coverage": p_coverage(cloud, [s.params for s in pred.segments], epsilon),
        "K_pred": pred.n_segments,
        "K_gt": int(len(gt_ids)),
    }
    if gt_types is not None:
        report["type_iou"] = type_iou([s.type for s in pred.segments], gt_types, matching)
    logger.info("Evaluated segmentation", **{k: v for k, v in report.items() if v is not None})
    return report


def label_report(pred_labels: LabelSource, gt_labels: LabelSource) -> Dict[str, Any]:
    """Label-only report for predictions without primitive parameters."""
    matching = match_segments(pred_labels, gt_labels)
    return {"seg_iou": matching.score, "type_iou": None, "res_error": None, "res_error_mean": None,
            "p_coverage": None, "K_pred": int(np.unique(_labels_of(pred_labels)).size),
            "K_gt": matching.n_gt}
