import json
import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ap_oracle, greedy_oracle, max_cardinality_matches, pixel_iou, random_scene
from trapline.domain import BoundingBox, Detection
from trapline.errors import NoGroundTruth
from trapline.ingest import Annotation
from trapline.metrics import (
    DONT_KNOW,
    PrCurve,
    average_precision,
    class_metrics_from_counts,
    confusion_matrix,
    curves_csv,
    evaluate_detections,
    evaluation_report,
    f1_confidence_sweep,
    iou,
    match_detections,
    mean_ap,
    pair_labels,
)


def B(*xs):
    return BoundingBox(*map(float, xs))


# --------------------------------------------------------------------------- iou

def test_iou_examples():
    assert iou(B(0, 0, 10, 10), B(0, 0, 10, 10)) == 1.0
    assert iou(B(0, 0, 10, 10), B(20, 20, 30, 30)) == 0.0
    assert iou(B(0, 0, 10, 10), B(5, 0, 15, 10)) == pytest.approx(50 / 150)
    # touching edges share no area
    assert iou(B(0, 0, 10, 10), B(10, 0, 20, 10)) == 0.0


int_box = st.tuples(
    st.integers(0, 40), st.integers(0, 40), st.integers(1, 24), st.integers(1, 24)
).map(lambda t: B(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(int_box, int_box)
def test_iou_matches_pixel_count(a, b):
    assert iou(a, b) == pytest.approx(float(pixel_iou(a, b)), abs=1e-12)


@given(int_box, int_box)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


# --------------------------------------------------------------------------- matching

def test_match_single_pair(det):
    gt = [Annotation(det("zebra").label, B(0, 0, 10, 10))]
    m = match_detections([det("zebra", (0, 0, 10, 6))], gt)  # IoU 0.6
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)


def test_match_below_threshold(det):
    gt = [Annotation(det("zebra").label, B(0, 0, 10, 10))]
    m = match_detections([det("zebra", (0, 0, 10, 4))], gt)  # IoU 0.4
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_duplicate_prediction(det):
    gt = [Annotation(det("zebra").label, B(0, 0, 10, 10))]
    preds = [det("zebra", (0, 0, 10, 9), 0.8), det("zebra", (1, 0, 10, 10), 0.9)]
    m = match_detections(preds, gt)
    outcome = {d.pred_index: d.outcome for d in m.dispositions}
    assert outcome == {1: "TP", 0: "FP"}
    assert m.dispositions[0].confidence == 0.9


def test_match_requires_same_class(det):
    gt = [Annotation(det("zebra").label, B(0, 0, 10, 10))]
    m = match_detections([det("lion", (0, 0, 10, 10))], gt)
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_rejects_bad_threshold(det):
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)


@pytest.mark.parametrize("seed", range(60))
def test_match_agrees_with_raster_oracle(seed):
    rng = random.Random(seed)
    scene = random_scene(rng)
    threshold = rng.choice([0.3, 0.5, 0.7])
    m = match_detections(scene.preds, scene.gts, threshold)
    got = [(d.pred_index, d.gt_index) for d in m.dispositions]
    assert got == greedy_oracle(scene.preds, scene.gts, threshold)
    assert m.tp <= min(len(scene.preds), len(scene.gts))
    assert m.tp <= max_cardinality_matches(scene.preds, scene.gts, threshold)
    matched = [d.gt_index for d in m.dispositions if d.gt_index is not None]
    assert len(matched) == len(set(matched))


# --------------------------------------------------------------------------- AP

def test_ap_perfect():
    curve = PrCurve.from_ranking([(0.9, True), (0.8, True)], 2)
    assert average_precision(curve) == 1.0


def test_ap_hand_computed():
    curve = PrCurve.from_ranking([(0.9, True), (0.8, False), (0.7, True)], 2)
    assert average_precision(curve) == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))
    assert average_precision(curve) == pytest.approx(float(ap_oracle([True, False, True], 2)))


def test_ap_needs_ground_truth():
    with pytest.raises(NoGroundTruth):
        average_precision(PrCurve.from_ranking([(0.5, False)], 0))


def test_mean_ap():
    assert mean_ap({"a": 1.0, "b": 0.5}) == 0.75


@given(st.lists(st.tuples(st.integers(1, 1000), st.booleans()), min_size=1, max_size=30, unique_by=lambda t: t[0]))
def test_ap_bounded_and_rank_only(ranked):
    n_gt = max(1, sum(hit for _, hit in ranked))
    ap = average_precision(PrCurve.from_ranking([(c / 1000, h) for c, h in ranked], n_gt))
    squashed = average_precision(PrCurve.from_ranking([((c / 1000) ** 3 * 0.5, h) for c, h in ranked], n_gt))
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(squashed, abs=1e-12)
    order = [h for _, h in sorted(ranked, key=lambda t: -t[0])]
    assert ap == pytest.approx(float(ap_oracle(order, n_gt)), abs=1e-12)


def test_evaluate_detections_reports_missing_ground_truth(det):
    gts = {"a": [Annotation(det("zebra").label, B(0, 0, 10, 10))]}
    preds = {"a": [det("zebra", (0, 0, 10, 10)), det("lion", (20, 20, 30, 30))]}
    ev = evaluate_detections(preds, gts)
    assert ev.per_class_ap == {"Equus quagga": 1.0}
    assert ev.no_ground_truth == ["Panthera leo"]
    assert ev.mean_ap == 1.0
    report = evaluation_report(ev)
    assert report["interpolation"] == "all-point"
    json.dumps(report)
    assert curves_csv(ev).splitlines()[0] == "series,class,x,y,confidence"


# --------------------------------------------------------------------------- table metrics

def test_class_metrics_from_table_rows():
    # precision 0.7, recall 1.0
    m = class_metrics_from_counts(tp=7, fp=3, fn=0, tn=0)
    assert round(m.f1, 4) == 0.8235
    # precision 1.0, recall 0.2
    m = class_metrics_from_counts(tp=1, fp=0, fn=4, tn=0)
    assert round(m.f1, 4) == 0.3333


def test_class_metrics_absent_class():
    m = class_metrics_from_counts(0, 0, 0, 10)
    assert (m.precision, m.recall, m.f1, m.accuracy) == (0.0, 0.0, 0.0, 1.0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_class_metrics_f1_is_harmonic(tp, fp, fn, tn):
    m = class_metrics_from_counts(tp, fp, fn, tn)
    p, r = m.precision, m.recall
    assert m.f1 == (pytest.approx(2 * p * r / (p + r)) if p + r else 0.0)
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert 0.0 <= v <= 1.0


# --------------------------------------------------------------------------- confusion

def test_confusion_diagonal():
    cm = confusion_matrix([("a", "a"), ("b", "b"), ("c", "c")])
    assert cm.counts[:, :3].tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    assert cm.counts[:, 3].sum() == 0


def test_confusion_dont_know_hits_recall_only():
    cm = confusion_matrix([("Papio sp", DONT_KNOW), ("Papio sp", "Papio sp"), ("Panthera leo", "Panthera leo")])
    papio = cm.class_metrics("Papio sp")
    assert (papio.tp, papio.fp, papio.fn) == (1, 0, 1)
    assert papio.precision == 1.0 and papio.recall == 0.5
    assert cm.class_metrics("Panthera leo").precision == 1.0
    assert cm.columns[-1] == DONT_KNOW


def test_confusion_matches_brute_force_counting():
    classes = ["a", "b", "c"]
    records = [
        ("a", "a"), ("a", "a"), ("a", "b"), ("a", DONT_KNOW),
        ("b", "b"), ("b", "c"), ("b", "b"), ("b", "a"),
        ("c", "c"), ("c", DONT_KNOW), ("c", "a"), ("c", "c"),
    ]
    cm = confusion_matrix(records, classes)
    for cls in classes:
        tp = sum(t == cls and p == cls for t, p in records)
        fp = sum(t != cls and p == cls for t, p in records)
        fn = sum(t == cls and p != cls for t, p in records)
        tn = len(records) - tp - fp - fn
        assert cm.decomposition(cls) == (tp, fp, fn, tn)
        assert cm.class_metrics(cls) == class_metrics_from_counts(tp, fp, fn, tn)
        assert cm.counts[classes.index(cls)].sum() == sum(t == cls for t, _ in records)


def test_pair_labels():
    assert pair_labels(["a", "a", "b"], ["a", "b"]) == [("a", "a"), ("b", "b"), ("a", DONT_KNOW)]
    assert pair_labels(["a", "b"], ["c"]) == [("a", "c"), ("b", DONT_KNOW)]
    assert pair_labels(["a"], ["a", "z", "z"]) == [("a", "a")]
    assert pair_labels([], ["a"]) == []


# --------------------------------------------------------------------------- sweep

GRID_05 = [round(i * 0.05, 2) for i in range(21)]


def test_sweep_two_predictions(det):
    gts = {"img": [Annotation(det("zebra").label, B(0, 0, 10, 10))]}
    preds = {"img": [det("zebra", (0, 0, 10, 10), 0.9), det("zebra", (40, 40, 50, 50), 0.6)]}
    sweep = f1_confidence_sweep(preds, gts, GRID_05)
    for pt in sweep.points:
        if pt.threshold <= 0.6:
            expected = Fraction(2, 3)
        elif pt.threshold <= 0.9:
            expected = Fraction(1)
        else:
            expected = Fraction(0)
        assert pt.f1 == pytest.approx(float(expected)), pt
    assert sweep.best_threshold == 0.65
    assert sweep.best_f1 == 1.0


def test_sweep_without_predictions(det):
    gts = {"img": [Annotation(det("zebra").label, B(0, 0, 10, 10))]}
    sweep = f1_confidence_sweep({}, gts, GRID_05)
    assert all(pt.f1 == 0.0 for pt in sweep.points)


def test_sweep_all_true_positives_picks_lowest(det):
    gts = {"img": [Annotation(det("zebra").label, B(0, 0, 10, 10))]}
    sweep = f1_confidence_sweep({"img": [det("zebra", (0, 0, 10, 10), 1.0)]}, gts, GRID_05)
    assert sweep.best_threshold == 0.0


def test_sweep_grid_validation(det):
    with pytest.raises(ValueError):
        f1_confidence_sweep({}, {}, [])
    with pytest.raises(ValueError):
        f1_confidence_sweep({}, {}, [0.5, 0.1])
