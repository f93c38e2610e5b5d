import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posedistill.metrics import (
    OKS_THRESHOLDS,
    MetricsReport,
    average_precision,
    confidence_calibration,
    evaluate,
    instance_scale,
    oks,
    pck,
    precision_recall_ap,
)


# --- OKS ------------------------------------------------------------------------------
def test_oks_perfect_is_one():
    gt = np.random.default_rng(0).uniform(0, 40, (13, 2))
    assert oks(gt, gt, np.ones(13, bool), 20.0, np.full(13, 0.1)) == 1.0


def test_oks_single_keypoint_at_one_e_fold():
    scale, kappa = 12.0, 0.1
    gt = np.zeros((3, 2))
    pred = gt.copy()
    pred[1, 0] = math.sqrt(2) * scale * kappa
    vis = np.array([False, True, False])
    assert oks(pred, gt, vis, scale, np.full(3, kappa)) == pytest.approx(math.exp(-1), rel=1e-12)


def test_oks_none_visible_is_zero():
    assert oks(np.zeros((2, 2)), np.ones((2, 2)), np.zeros(2, bool), 1.0, [0.1, 0.1]) == 0.0


def loop_oks(pred, gt, vis, scale, kappas):
    total, count = 0.0, 0
    for k in range(len(gt)):
        if vis[k]:
            dx, dy = pred[k][0] - gt[k][0], pred[k][1] - gt[k][1]
            total += math.exp(-(dx * dx + dy * dy) / (2 * scale * scale * kappas[k] * kappas[k]))
            count += 1
    return total / count if count else 0.0


def test_oks_matches_scalar_loop():
    rng = np.random.default_rng(1)
    for _ in range(50):
        gt = rng.uniform(0, 48, (13, 2))
        pred = gt + rng.normal(0, 2, (13, 2))
        vis = rng.uniform(size=13) < 0.8
        kappas = rng.uniform(0.05, 0.2, 13)
        scale = rng.uniform(5, 40)
        assert oks(pred, gt, vis, scale, kappas) == pytest.approx(loop_oks(pred, gt, vis, scale, kappas), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 2**31))
def test_oks_translation_invariant(tx, ty, seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 48, (13, 2))
    pred = gt + rng.normal(0, 2, (13, 2))
    vis = rng.uniform(size=13) < 0.8
    shift = np.array([tx, ty])
    a = oks(pred, gt, vis, 10.0, 0.1)
    b = oks(pred + shift, gt + shift, vis, 10.0, 0.1)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_oks_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        oks(np.zeros((1, 2)), np.zeros((1, 2)), [True], 0.0, [0.1])


def test_instance_scale_padded_box():
    gt = np.array([[0.0, 0.0], [10.0, 20.0], [50.0, 50.0]])
    vis = np.array([True, True, False])
    assert instance_scale(gt, vis) == pytest.approx(math.sqrt(12.0 * 24.0))
    # degenerate extents are floored at one pixel
    assert instance_scale(gt[:1], [True]) == pytest.approx(1.2)


# --- AP -------------------------------------------------------------------------------
def test_ap_all_perfect_is_one():
    ap, per = average_precision(np.linspace(0.1, 0.9, 7), np.ones(7))
    assert ap == 1.0 and all(v == 1.0 for v in per.values())


def test_ap_all_zero_oks_is_zero():
    ap, per = average_precision(np.linspace(0.1, 0.9, 7), np.zeros(7))
    assert ap == 0.0 and all(v == 0.0 for v in per.values())


def enumerated_ap(scores, is_tp, num_gt):
    """Walk the ranked list point by point, then take the precision envelope at each recall step."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    points = []
    tp = 0
    for n, i in enumerate(order, 1):
        tp += bool(is_tp[i])
        points.append((tp / num_gt, tp / n))
    ap, prev = 0.0, 0.0
    for idx, (r, _) in enumerate(points):
        if r > prev:
            best = max(p for rr, p in points[idx:])
            ap += (r - prev) * best
            prev = r
    return ap


TOY_SCORES = [0.91, 0.85, 0.80, 0.72, 0.66, 0.55, 0.43, 0.38, 0.22, 0.10]
TOY_OKS = [0.97, 0.40, 0.88, 0.76, 0.52, 0.93, 0.12, 0.81, 0.67, 0.58]


def test_ap_matches_enumerated_pr_curve():
    _, per = average_precision(TOY_SCORES, TOY_OKS)
    for t in OKS_THRESHOLDS:
        expected = enumerated_ap(TOY_SCORES, [o >= t for o in TOY_OKS], len(TOY_OKS))
        assert abs(per[t] - expected) <= 1e-9


def test_ap_toy_hand_value_at_half():
    # misses sit at ranks 2 and 7; the envelope is 1 up to recall 0.1, 5/6 up to 0.5, 4/5 up to 0.8
    _, per = average_precision(TOY_SCORES, TOY_OKS)
    assert per[0.5] == pytest.approx(0.1 + 0.4 * 5 / 6 + 0.3 * 0.8, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1000), st.floats(0, 1)), min_size=1, max_size=30))
def test_ap_invariant_to_monotone_rescaling(pairs):
    # integer-grid scores keep the transform strictly monotone in floating point
    scores = np.array([p[0] / 1000 for p in pairs])
    oks_values = np.array([p[1] for p in pairs])
    a, _ = average_precision(scores, oks_values)
    b, _ = average_precision(np.exp(3 * scores) + 7, oks_values)
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30), st.data())
def test_duplicating_a_true_positive_never_decreases_ap(pairs, data):
    scores = [p[0] for p in pairs]
    oks_values = [p[1] for p in pairs]
    t = data.draw(st.sampled_from(OKS_THRESHOLDS))
    hits = [i for i, o in enumerate(oks_values) if o >= t]
    if not hits:
        return
    i = data.draw(st.sampled_from(hits))
    _, before = average_precision(scores, oks_values, (t,))
    _, after = average_precision(scores + [scores[i]], oks_values + [oks_values[i]], (t,))
    assert after[t] >= before[t] - 1e-12


def test_duplicating_a_false_positive_can_decrease_ap():
    # ranked TP then FP gives 0.5; a second copy of the FP pair adds a miss and a ground truth
    assert precision_recall_ap([0.9, 0.1], [True, False], 2) == 0.5
    assert precision_recall_ap([0.9, 0.1, 0.1], [True, False, False], 3) == pytest.approx(1 / 3)


def test_ap_mean_bounded_by_best_threshold():
    ap, per = average_precision(TOY_SCORES, TOY_OKS)
    assert 0 <= ap <= max(per.values()) <= 1


# --- PCK and calibration ------------------------------------------------------------
def test_pck_counts_visible_within_radius():
    gt = np.zeros((4, 2))
    pred = np.array([[1.0, 0], [3.0, 4.0], [0, 5.1], [100, 0]])
    vis = np.array([True, True, True, False])
    assert pck(pred, gt, vis, 5.0) == pytest.approx(2 / 3)


def test_calibration_all_ties_is_half():
    assert confidence_calibration(np.full(9, 0.3), [True] * 4 + [False] * 5) == 0.5


def test_calibration_perfect_separation_is_one():
    assert confidence_calibration([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0
    assert confidence_calibration([0.9, 0.8, 0.2, 0.1], [False, False, True, True]) == 0.0


def pair_count(conf, correct):
    pos = [c for c, ok in zip(conf, correct) if ok]
    neg = [c for c, ok in zip(conf, correct) if not ok]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def test_calibration_matches_pair_count():
    rng = np.random.default_rng(2)
    for _ in range(20):
        conf = rng.integers(0, 8, 60) / 8  # coarse values force ties
        correct = rng.uniform(size=60) < 0.6
        assert confidence_calibration(conf, correct) == pair_count(conf, correct)


@pytest.mark.parametrize("correct", [[True] * 5, [False] * 5, []])
def test_calibration_degenerate_is_undefined(correct):
    assert confidence_calibration(np.linspace(0, 1, len(correct)), correct) is None


# --- report -------------------------------------------------------------------------
def test_evaluate_report_ranges_and_csv():
    rng = np.random.default_rng(3)
    gt = rng.uniform(5, 40, (20, 13, 2))
    pred = gt + rng.normal(0, 3, gt.shape)
    vis = rng.uniform(size=(20, 13)) < 0.9
    conf = rng.uniform(size=(20, 13))
    report = evaluate(pred, conf, rng.uniform(0.7, 1, 20), gt, vis, (64, 48))
    values = [report.ap, report.ap50, report.ap75, report.pck, report.calib_auc]
    assert all(0 <= v <= 1 for v in values)
    assert report.ap <= max(report.per_threshold.values())
    lines = report.to_csv().splitlines()
    assert lines[0] == "metric,value" and lines[1].startswith("ap,")
    assert len(lines) == 1 + 5 + 10


def test_evaluate_perfect_predictions():
    rng = np.random.default_rng(4)
    gt = rng.uniform(5, 40, (6, 13, 2))
    vis = np.ones((6, 13), bool)
    report = evaluate(gt, rng.uniform(size=(6, 13)), np.ones(6), gt, vis, (64, 48))
    assert report.ap == 1.0 and report.pck == 1.0
    assert report.calib_auc is None  # every keypoint is correct
    assert "calib_auc,undefined" in report.to_csv()
    assert "undefined" in report.summary()


def test_report_formats_values():
    r = MetricsReport(0.5, 0.75, 0.25, 1.0, None, {0.5: 0.75})
    assert ("ap@0.50", "0.750000") in r.rows()
