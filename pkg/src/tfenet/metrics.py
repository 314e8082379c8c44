"""Volume-overlap and airway-tree evaluation metrics.

Overlap scores come straight from the confusion counts.  Tree scores
compare the reference centerline (a skeleton graph) against the
predicted mask: TD is the covered fraction of centerline voxels, BD the
fraction of branches with strictly more than 80% of their centerline
covered.  Composite scores are fixed convex combinations of the rest.

Ratios with a zero denominator follow one rule: 1 when both masks are
empty, 0 otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .skeleton import SkeletonGraph, skeletonize

BRANCH_DETECTION_FRACTION = 0.8


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Voxelwise confusion counts for two binary masks of equal shape."""
    p = np.asarray(pred) != 0
    g = np.asarray(gt) != 0
    if p.shape != g.shape:
        raise ArgumentError(
            f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int, counts: ConfusionCounts) -> float:
    if den > 0:
        return num / den
    # empty/empty pairs score 1, anything else with a dead denominator 0
    return 1.0 if counts.tp + counts.fp + counts.fn == 0 else 0.0


def precision(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp, counts)


def dsc(counts: ConfusionCounts) -> float:
    return _ratio(2 * counts.tp, counts.fp + 2 * counts.tp + counts.fn, counts)


def iou(counts: ConfusionCounts, as_printed: bool = False) -> float:
    """Intersection over union; as_printed flips to the complement form.

    The complement (1 - TP/(TP+FP+FN)) exists only for comparison with
    reports that used it; it is not part of any composite score here.
    """
    v = _ratio(counts.tp, counts.tp + counts.fp + counts.fn, counts)
    return 1.0 - v if as_printed else v


def leakage(counts: ConfusionCounts) -> float:
    """1 - FP relative to reference volume; higher is better."""
    return _ratio(counts.tp + counts.fn - counts.fp,
                  counts.tp + counts.fn, counts)


def tree_length_detected(pred: np.ndarray, gt_skel: SkeletonGraph) -> float:
    """Fraction of reference centerline voxels inside the prediction."""
    if gt_skel.total_length == 0:
        raise ArgumentError("reference skeleton is empty; TD is undefined")
    p = np.asarray(pred) != 0
    if p.shape != gt_skel.shape:
        raise ArgumentError(
            f"prediction shape {p.shape} does not match skeleton "
            f"shape {gt_skel.shape}")
    v = gt_skel.voxels
    inside = p[v[:, 0], v[:, 1], v[:, 2]]
    return float(np.count_nonzero(inside)) / v.shape[0]


def branch_detected(pred: np.ndarray, gt_skel: SkeletonGraph) -> float:
    """Fraction of reference branches with > 80% centerline coverage.

    The threshold is strict: a 10-voxel branch with exactly 8 covered
    voxels does not count.
    """
    if gt_skel.total_length == 0:
        raise ArgumentError("reference skeleton is empty; BD is undefined")
    if not gt_skel.branches:
        raise ArgumentError("reference skeleton has no branches; BD is undefined")
    p = np.asarray(pred) != 0
    if p.shape != gt_skel.shape:
        raise ArgumentError(
            f"prediction shape {p.shape} does not match skeleton "
            f"shape {gt_skel.shape}")
    detected = 0
    for b in gt_skel.branches:
        covered = int(np.count_nonzero(p[b[:, 0], b[:, 1], b[:, 2]]))
        if covered > BRANCH_DETECTION_FRACTION * b.shape[0]:
            detected += 1
    return detected / len(gt_skel.branches)


def composite_scores(precision_: float, dsc_: float, td: float, bd: float,
                     iou_: float, leakage_: float) -> tuple[float, float]:
    mean_score = 0.25 * (precision_ + dsc_ + td + bd)
    overall = 0.7 * 0.25 * (iou_ + precision_ + td + bd) + 0.3 * leakage_
    return mean_score, overall


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    precision: float
    dsc: float
    iou: float
    leakage: float
    td: float
    bd: float
    mean_score: float
    overall_score: float
    case: str = field(default="")

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "tp": self.counts.tp, "fp": self.counts.fp,
            "fn": self.counts.fn, "tn": self.counts.tn,
            "precision": self.precision, "dsc": self.dsc,
            "iou": self.iou, "leakage": self.leakage,
            "td": self.td, "bd": self.bd,
            "mean_score": self.mean_score,
            "overall_score": self.overall_score,
        }

    CSV_FIELDS = ("case", "tp", "fp", "fn", "tn", "precision", "dsc",
                  "iou", "leakage", "td", "bd", "mean_score",
                  "overall_score")


def evaluate_pair(pred: np.ndarray, gt: np.ndarray,
                  gt_skel: SkeletonGraph | None = None,
                  case: str = "", iou_as_printed: bool = False) -> MetricsReport:
    """All metrics for one (prediction, reference) mask pair.

    The reference centerline is skeletonized from gt unless a
    precomputed graph is passed (phantom cases carry exact ones).
    Empty references yield TD = BD = 1 against an empty prediction and
    0 otherwise, mirroring the overlap-ratio rule, since the skeleton
    of an empty mask cannot be scored.
    """
    c = confusion(pred, gt)
    if gt_skel is None:
        gt_skel = skeletonize(np.asarray(gt) != 0)
    if gt_skel.total_length == 0:
        degenerate = 1.0 if np.count_nonzero(pred) == 0 else 0.0
        td = bd = degenerate
    else:
        td = tree_length_detected(pred, gt_skel)
        bd = branch_detected(pred, gt_skel)
    p = precision(c)
    d = dsc(c)
    i = iou(c, as_printed=iou_as_printed)
    lk = leakage(c)
    mean_score, overall = composite_scores(p, d, td, bd, iou(c), lk)
    return MetricsReport(counts=c, precision=p, dsc=d, iou=i, leakage=lk,
                         td=td, bd=bd, mean_score=mean_score,
                         overall_score=overall, case=case)
