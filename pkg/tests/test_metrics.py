"""Overlap and tree metrics against brute-force voxel enumeration."""
import numpy as np
import pytest

from tfenet.errors import ArgumentError
from tfenet.metrics import (MetricsReport, branch_detected, composite_scores,
                            confusion, dsc, evaluate_pair, iou, leakage,
                            precision, tree_length_detected)
from tfenet.skeleton import SkeletonGraph


def brute_counts(pred, gt):
    tp = fp = fn = tn = 0
    for z in range(pred.shape[0]):
        for y in range(pred.shape[1]):
            for x in range(pred.shape[2]):
                p, g = bool(pred[z, y, x]), bool(gt[z, y, x])
                if p and g:
                    tp += 1
                elif p:
                    fp += 1
                elif g:
                    fn += 1
                else:
                    tn += 1
    return tp, fp, fn, tn


def brute_ratio(num, den, tp, fp, fn):
    if den > 0:
        return num / den
    return 1.0 if tp + fp + fn == 0 else 0.0


def random_pairs(n=200, seed=5):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        if i == 0:                      # both empty
            pred = np.zeros((4, 4, 4), dtype=np.uint8)
            gt = np.zeros((4, 4, 4), dtype=np.uint8)
        elif i == 1:                    # prediction only
            pred = np.ones((4, 4, 4), dtype=np.uint8)
            gt = np.zeros((4, 4, 4), dtype=np.uint8)
        elif i == 2:                    # reference only
            pred = np.zeros((4, 4, 4), dtype=np.uint8)
            gt = np.ones((4, 4, 4), dtype=np.uint8)
        else:
            p = rng.uniform(0.05, 0.7)
            pred = (rng.random((4, 4, 4)) < p).astype(np.uint8)
            gt = (rng.random((4, 4, 4)) < p).astype(np.uint8)
        pairs.append((pred, gt))
    return pairs


def test_confusion_matches_enumeration():
    for pred, gt in random_pairs():
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == brute_counts(pred, gt)
        assert c.total == pred.size


def test_overlap_scores_match_enumeration():
    for pred, gt in random_pairs():
        c = confusion(pred, gt)
        tp, fp, fn, _ = brute_counts(pred, gt)
        assert precision(c) == pytest.approx(
            brute_ratio(tp, tp + fp, tp, fp, fn), abs=1e-15)
        assert dsc(c) == pytest.approx(
            brute_ratio(2 * tp, 2 * tp + fp + fn, tp, fp, fn), abs=1e-15)
        assert iou(c) == pytest.approx(
            brute_ratio(tp, tp + fp + fn, tp, fp, fn), abs=1e-15)
        assert leakage(c) == pytest.approx(
            brute_ratio(tp + fn - fp, tp + fn, tp, fp, fn), abs=1e-15)


def test_dsc_iou_identity():
    for pred, gt in random_pairs():
        c = confusion(pred, gt)
        assert abs(dsc(c) - 2 * iou(c) / (1 + iou(c))) < 1e-12


def test_iou_printed_form_is_complement():
    pred = np.zeros((4, 4, 4), dtype=np.uint8)
    gt = np.zeros((4, 4, 4), dtype=np.uint8)
    pred[0, 0, :2] = 1
    gt[0, 0, 1:3] = 1
    c = confusion(pred, gt)
    assert iou(c, as_printed=True) == pytest.approx(1.0 - iou(c), abs=1e-15)


def test_confusion_shape_mismatch():
    with pytest.raises(ArgumentError):
        confusion(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


def line_graph(n, shape=(3, 16, 3)):
    vox = np.array([(1, y, 1) for y in range(n)], dtype=np.int64)
    return SkeletonGraph(shape=shape, voxels=vox, branches=[vox],
                         n_bifurcations=0, n_endpoints=2)


def test_tree_length_detected_fraction():
    g = line_graph(10)
    pred = np.zeros(g.shape, dtype=np.uint8)
    pred[1, :7, 1] = 1
    assert tree_length_detected(pred, g) == pytest.approx(0.7)
    pred[1, :, 1] = 1
    assert tree_length_detected(pred, g) == 1.0
    assert tree_length_detected(np.zeros(g.shape, np.uint8), g) == 0.0


def test_branch_detection_is_strictly_greater_than_80pct():
    g = line_graph(10)
    pred = np.zeros(g.shape, dtype=np.uint8)
    pred[1, :8, 1] = 1                  # exactly 8 of 10: not detected
    assert branch_detected(pred, g) == 0.0
    pred[1, 8, 1] = 1                   # 9 of 10: detected
    assert branch_detected(pred, g) == 1.0


def test_branch_detection_counts_per_branch():
    a = np.array([(1, y, 1) for y in range(10)], dtype=np.int64)
    b = np.array([(5, y, 1) for y in range(10)], dtype=np.int64)
    g = SkeletonGraph(shape=(8, 16, 3), voxels=np.vstack([a, b]),
                      branches=[a, b], n_bifurcations=0, n_endpoints=4)
    pred = np.zeros(g.shape, dtype=np.uint8)
    pred[1, :, 1] = 1                   # branch a fully covered
    pred[5, :8, 1] = 1                  # branch b at the threshold
    assert branch_detected(pred, g) == 0.5


def test_tree_metrics_reject_empty_reference():
    empty = SkeletonGraph(shape=(4, 4, 4),
                          voxels=np.zeros((0, 3), dtype=np.int64),
                          branches=[], n_bifurcations=0, n_endpoints=0)
    pred = np.zeros((4, 4, 4), dtype=np.uint8)
    with pytest.raises(ArgumentError):
        tree_length_detected(pred, empty)
    with pytest.raises(ArgumentError):
        branch_detected(pred, empty)


def test_tree_metrics_reject_shape_mismatch():
    g = line_graph(10)
    with pytest.raises(ArgumentError):
        tree_length_detected(np.zeros((2, 2, 2), np.uint8), g)
    with pytest.raises(ArgumentError):
        branch_detected(np.zeros((2, 2, 2), np.uint8), g)


def test_composite_scores_all_ones():
    mean_score, overall = composite_scores(1, 1, 1, 1, 1, 1)
    assert mean_score == 1.0
    assert overall == 1.0


def test_composite_scores_linearity():
    # each input contributes its fixed coefficient, nothing else
    assert composite_scores(1, 0, 0, 0, 0, 0) == (0.25, 0.7 * 0.25)
    assert composite_scores(0, 1, 0, 0, 0, 0) == (0.25, 0.0)
    assert composite_scores(0, 0, 1, 0, 0, 0) == (0.25, 0.7 * 0.25)
    assert composite_scores(0, 0, 0, 1, 0, 0) == (0.25, 0.7 * 0.25)
    assert composite_scores(0, 0, 0, 0, 1, 0) == (0.0, 0.7 * 0.25)
    assert composite_scores(0, 0, 0, 0, 0, 1) == (0.0, 0.3)
    a = composite_scores(0.3, 0.5, 0.7, 0.9, 0.4, 0.6)
    b = composite_scores(0.6, 1.0, 1.4, 1.8, 0.8, 1.2)
    assert b[0] == pytest.approx(2 * a[0], abs=1e-15)
    assert b[1] == pytest.approx(2 * a[1], abs=1e-15)


def test_evaluate_pair_identical_masks_scores_ones():
    gt = np.zeros((24, 24, 24), dtype=np.uint8)
    gt[4:20, 10:13, 10:13] = 1
    r = evaluate_pair(gt, gt, case="self")
    assert r.precision == 1.0
    assert r.dsc == 1.0
    assert r.iou == 1.0
    assert r.leakage == 1.0
    assert r.td == 1.0
    assert r.bd == 1.0
    assert r.mean_score == 1.0
    assert r.overall_score == 1.0
    assert r.case == "self"


def test_evaluate_pair_empty_reference_rule():
    empty = np.zeros((6, 6, 6), dtype=np.uint8)
    r = evaluate_pair(empty, empty)
    assert r.td == 1.0 and r.bd == 1.0
    pred = empty.copy()
    pred[2, 2, 2] = 1
    r = evaluate_pair(pred, empty)
    assert r.td == 0.0 and r.bd == 0.0


def test_evaluate_pair_accepts_precomputed_skeleton():
    g = line_graph(10)
    gt = np.zeros(g.shape, dtype=np.uint8)
    gt[1, :10, 1] = 1
    pred = np.zeros(g.shape, dtype=np.uint8)
    pred[1, :5, 1] = 1
    r = evaluate_pair(pred, gt, gt_skel=g)
    assert r.td == pytest.approx(0.5)
    assert r.bd == 0.0


def test_evaluate_pair_printed_iou_does_not_change_composites():
    rng = np.random.default_rng(3)
    gt = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
    pred = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
    a = evaluate_pair(pred, gt)
    b = evaluate_pair(pred, gt, iou_as_printed=True)
    assert b.iou == pytest.approx(1.0 - a.iou, abs=1e-15)
    assert b.overall_score == a.overall_score
    assert b.mean_score == a.mean_score


def test_report_dict_matches_csv_fields():
    gt = np.zeros((6, 6, 6), dtype=np.uint8)
    gt[1:5, 3, 3] = 1
    r = evaluate_pair(gt, gt, case="c0")
    d = r.to_dict()
    assert tuple(d.keys()) == MetricsReport.CSV_FIELDS
    assert d["case"] == "c0"
    assert d["tp"] == 4 and d["tn"] == 6 ** 3 - 4
