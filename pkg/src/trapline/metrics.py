"""Detection and classification evaluation.

IoU, greedy matching, precision-recall curves with all-point interpolated
AP, per-class table metrics, confusion matrices with an abstention column,
and F1-confidence sweeps.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from trapline.domain import BoundingBox, TaxonomyClass
from trapline.errors import NoGroundTruth

DONT_KNOW = "Don't Know"
INTERPOLATION = "all-point"


class _Boxed(Protocol):
    box: BoundingBox
    label: TaxonomyClass


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class Disposition:
    pred_index: int
    outcome: str  # "TP" or "FP"
    gt_index: int | None
    iou: float
    confidence: float


@dataclass(frozen=True)
class MatchResult:
    dispositions: tuple[Disposition, ...]  # in ranking order (confidence descending)
    unmatched_gts: tuple[int, ...]
    iou_threshold: float

    @property
    def tp(self) -> int:
        return sum(d.outcome == "TP" for d in self.dispositions)

    @property
    def fp(self) -> int:
        return sum(d.outcome == "FP" for d in self.dispositions)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gts)


def _ranking(preds: Sequence) -> list[int]:
    # stable: confidence ties keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match_detections(
    preds: Sequence, gts: Sequence[_Boxed], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy matching in descending confidence.

    Each prediction takes the unmatched same-class ground truth of highest
    IoU (earliest on ties); it is a TP if that IoU reaches the threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    taken = [False] * len(gts)
    out = []
    for pi in _ranking(preds):
        pred = preds[pi]
        best, best_iou = None, -1.0
        for gi, gt in enumerate(gts):
            if taken[gi] or gt.label != pred.label:
                continue
            o = iou(pred.box, gt.box)
            if o > best_iou:
                best, best_iou = gi, o
        if best is not None and best_iou >= iou_threshold:
            taken[best] = True
            out.append(Disposition(pi, "TP", best, best_iou, pred.confidence))
        else:
            out.append(Disposition(pi, "FP", None, max(best_iou, 0.0), pred.confidence))
    fn = tuple(i for i, t in enumerate(taken) if not t)
    return MatchResult(tuple(out), fn, iou_threshold)


@dataclass(frozen=True)
class PrCurve:
    recall: tuple[float, ...]
    precision: tuple[float, ...]
    confidence: tuple[float, ...]
    n_gt: int
    interpolated: tuple[float, ...] = field(default=(), compare=False)

    @classmethod
    def from_ranking(cls, ranked: Iterable[tuple[float, bool]], n_gt: int) -> "PrCurve":
        """Build the curve from (confidence, is_tp) pairs, sorted here by confidence."""
        items = sorted(ranked, key=lambda x: -x[0])
        tp = fp = 0
        rec, prec, conf = [], [], []
        for c, hit in items:
            tp += bool(hit)
            fp += not hit
            rec.append(tp / n_gt if n_gt else 0.0)
            prec.append(tp / (tp + fp))
            conf.append(c)
        interp = list(prec)
        for i in range(len(interp) - 2, -1, -1):
            interp[i] = max(interp[i], interp[i + 1])
        return cls(tuple(rec), tuple(prec), tuple(conf), n_gt, tuple(interp))

    @classmethod
    def from_matches(cls, matches: Iterable[MatchResult], n_gt: int | None = None) -> "PrCurve":
        matches = list(matches)
        ranked = [(d.confidence, d.outcome == "TP") for m in matches for d in m.dispositions]
        if n_gt is None:
            n_gt = sum(m.tp + m.fn for m in matches)
        return cls.from_ranking(ranked, n_gt)

    def points(self) -> list[dict]:
        return [
            {"recall": r, "precision": p, "interpolated_precision": ip, "confidence": c}
            for r, p, ip, c in zip(self.recall, self.precision, self.interpolated, self.confidence)
        ]


def average_precision(curve: PrCurve) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    if curve.n_gt == 0:
        raise NoGroundTruth("average precision is undefined without ground truth")
    ap, prev_r = 0.0, 0.0
    for r, p in zip(curve.recall, curve.interpolated):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def mean_ap(per_class: Mapping[Hashable, float]) -> float:
    if not per_class:
        return 0.0
    return float(sum(per_class.values()) / len(per_class))


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy_one_vs_rest": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


def harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def class_metrics_from_counts(tp: int, fp: int, fn: int, tn: int = 0) -> ClassMetrics:
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    return ClassMetrics(accuracy, precision, recall, harmonic(precision, recall), tp, fp, fn, tn)


class ConfusionMatrix:
    """Rows are true classes, columns predicted classes plus a trailing Don't Know column."""

    def __init__(self, classes: Sequence[str], counts: np.ndarray | None = None):
        self.classes = list(classes)
        self._index = {c: i for i, c in enumerate(self.classes)}
        n = len(self.classes)
        self.counts = np.zeros((n, n + 1), dtype=np.int64) if counts is None else counts

    @property
    def columns(self) -> list[str]:
        return [*self.classes, DONT_KNOW]

    def add(self, true: str, predicted: str) -> None:
        col = len(self.classes) if predicted == DONT_KNOW else self._index[predicted]
        self.counts[self._index[true], col] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def decomposition(self, cls: str) -> tuple[int, int, int, int]:
        """One-vs-rest (tp, fp, fn, tn); abstentions cost recall only."""
        i = self._index[cls]
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn

    def class_metrics(self, cls: str) -> ClassMetrics:
        return class_metrics_from_counts(*self.decomposition(cls))

    def per_class(self) -> dict[str, ClassMetrics]:
        return {c: self.class_metrics(c) for c in self.classes}

    def to_dict(self) -> dict:
        return {"rows": self.classes, "columns": self.columns, "counts": self.counts.tolist()}


def confusion_matrix(
    records: Iterable[tuple[str, str]], classes: Sequence[str] | None = None
) -> ConfusionMatrix:
    """Accumulate (true, predicted) pairs; ``predicted`` may be DONT_KNOW."""
    records = [(str(t), str(p)) for t, p in records]
    if classes is None:
        names = {t for t, _ in records} | {p for _, p in records if p != DONT_KNOW}
        classes = sorted(names)
    cm = ConfusionMatrix(classes)
    for t, p in records:
        cm.add(t, p)
    return cm


def pair_labels(true: Sequence[str], predicted: Sequence[str]) -> list[tuple[str, str]]:
    """Pair an image's true labels with the labels a reader reported.

    Agreements pair first; remaining true labels take the remaining reports in
    sorted order, and any still unpaired become DONT_KNOW. Reports beyond the
    number of true objects have no row to land in and are dropped.
    """
    left_true = sorted(true)
    left_pred = sorted(predicted)
    pairs = []
    for label in sorted(set(left_true)):
        while label in left_true and label in left_pred:
            left_true.remove(label)
            left_pred.remove(label)
            pairs.append((label, label))
    for i, label in enumerate(left_true):
        pairs.append((label, left_pred[i] if i < len(left_pred) else DONT_KNOW))
    return pairs


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class SweepResult:
    points: tuple[SweepPoint, ...]
    best_threshold: float
    best_f1: float

    def to_dict(self) -> dict:
        return {
            "best_threshold": self.best_threshold,
            "best_f1": self.best_f1,
            "points": [p.__dict__ for p in self.points],
        }


def f1_confidence_sweep(
    preds: Mapping[str, Sequence],
    gts: Mapping[str, Sequence[_Boxed]],
    grid: Sequence[float],
    iou_threshold: float = 0.5,
) -> SweepResult:
    """Micro-averaged F1 as a function of the confidence cut (kept iff confidence >= t).

    The reported optimum is the lowest grid threshold attaining the maximum.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted ascending")
    images = sorted(set(preds) | set(gts))
    points = []
    for t in grid:
        tp = fp = fn = 0
        for image in images:
            kept = [d for d in preds.get(image, ()) if d.confidence >= t]
            m = match_detections(kept, gts.get(image, ()), iou_threshold)
            tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        points.append(SweepPoint(t, p, r, harmonic(p, r)))
    best = max(points, key=lambda pt: pt.f1)  # max() keeps the first (lowest) on ties
    return SweepResult(tuple(points), best.threshold, best.f1)


@dataclass
class DetectionEvaluation:
    iou_threshold: float
    per_class_ap: dict[str, float]
    curves: dict[str, PrCurve]
    no_ground_truth: list[str]
    totals: dict[str, int]

    @property
    def mean_ap(self) -> float:
        return mean_ap(self.per_class_ap)


def evaluate_detections(
    preds: Mapping[str, Sequence],
    gts: Mapping[str, Sequence[_Boxed]],
    iou_threshold: float = 0.5,
) -> DetectionEvaluation:
    """Per-class AP over a corpus. Classes without ground truth are reported, not averaged."""
    images = sorted(set(preds) | set(gts))
    labels: dict[str, None] = {}
    for image in images:
        for item in (*preds.get(image, ()), *gts.get(image, ())):
            labels.setdefault(item.label.scientific_name, None)
    per_class, curves, missing = {}, {}, []
    totals = {"tp": 0, "fp": 0, "fn": 0}
    for name in sorted(labels):
        matches = []
        n_gt = 0
        for image in images:
            p = [d for d in preds.get(image, ()) if d.label.scientific_name == name]
            g = [a for a in gts.get(image, ()) if a.label.scientific_name == name]
            n_gt += len(g)
            m = match_detections(p, g, iou_threshold)
            matches.append(m)
            totals["tp"] += m.tp
            totals["fp"] += m.fp
            totals["fn"] += m.fn
        curve = PrCurve.from_matches(matches, n_gt)
        curves[name] = curve
        try:
            per_class[name] = average_precision(curve)
        except NoGroundTruth:
            missing.append(name)
    return DetectionEvaluation(iou_threshold, per_class, curves, missing, totals)


def evaluation_report(
    detection: DetectionEvaluation | None = None,
    classification: ConfusionMatrix | None = None,
    sweep: SweepResult | None = None,
) -> dict:
    report: dict = {"interpolation": INTERPOLATION, "accuracy_definition": "one-vs-rest"}
    if detection is not None:
        report["detection"] = {
            "iou_threshold": detection.iou_threshold,
            "mAP": detection.mean_ap,
            "per_class_ap": detection.per_class_ap,
            "no_ground_truth": detection.no_ground_truth,
            "totals": detection.totals,
            "pr_curves": {k: c.points() for k, c in detection.curves.items()},
        }
    if classification is not None:
        report["classification"] = {
            "per_class": {k: m.to_dict() for k, m in classification.per_class().items()},
            "confusion_matrix": classification.to_dict(),
        }
    if sweep is not None:
        report["f1_sweep"] = sweep.to_dict()
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, ensure_ascii=False) + "\n"


def curves_csv(detection: DetectionEvaluation, sweep: SweepResult | None = None) -> str:
    """Flat CSV of PR and F1-sweep points for plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["series", "class", "x", "y", "confidence"])
    for name, curve in detection.curves.items():
        for r, p, c in zip(curve.recall, curve.interpolated, curve.confidence):
            writer.writerow(["pr", name, repr(r), repr(p), repr(c)])
    if sweep is not None:
        for pt in sweep.points:
            writer.writerow(["f1", "all", repr(pt.threshold), repr(pt.f1), repr(pt.threshold)])
    return buf.getvalue()
