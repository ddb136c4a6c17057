"""Independent reference computations used to check the library.

These deliberately avoid the library's own arithmetic: IoU by counting
pixels on a raster, AP by exact rational integration of the interpolated
precision step function, search by scoring every row and sorting.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from trapline.domain import BoundingBox, Detection, default_taxonomy
from trapline.ingest import Annotation

CANVAS = 64


def pixel_iou(a: BoundingBox, b: BoundingBox, size: int = CANVAS) -> Fraction:
    """IoU of integer-cornered boxes by rasterising both onto a grid."""
    ma = np.zeros((size, size), dtype=bool)
    mb = np.zeros((size, size), dtype=bool)
    ma[int(a.y_min):int(a.y_max), int(a.x_min):int(a.x_max)] = True
    mb[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = True
    union = int((ma | mb).sum())
    return Fraction(int((ma & mb).sum()), union) if union else Fraction(0)


def greedy_oracle(preds, gts, threshold: float) -> list[tuple[int, int | None]]:
    """(pred index, matched gt index or None) in processing order, from raster IoUs."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken: set[int] = set()
    out = []
    for pi in order:
        cands = [
            (pixel_iou(preds[pi].box, g.box), -gi, gi)
            for gi, g in enumerate(gts)
            if gi not in taken and g.label == preds[pi].label
        ]
        if cands:
            best_iou, _, gi = max(cands)
            if best_iou >= Fraction(threshold).limit_denominator(10**6):
                taken.add(gi)
                out.append((pi, gi))
                continue
        out.append((pi, None))
    return out


def max_cardinality_matches(preds, gts, threshold: float) -> int:
    """Largest possible number of valid (pred, gt) pairs, by exhaustive search."""
    valid = {
        (pi, gi)
        for pi, p in enumerate(preds)
        for gi, g in enumerate(gts)
        if p.label == g.label and pixel_iou(p.box, g.box) >= Fraction(threshold).limit_denominator(10**6)
    }
    # every injective assignment of ground truths to predictions (or to nothing)
    slots = [*range(len(preds)), *([None] * len(gts))]
    best = 0
    for perm in set(itertools.permutations(slots, len(gts))):
        best = max(best, sum((pi, gi) in valid for gi, pi in enumerate(perm)))
    return best


def ap_oracle(ranked_hits: list[bool], n_gt: int) -> Fraction:
    """Exact area under the all-point interpolated PR step function.

    ``ranked_hits`` is the TP/FP sequence already in ranking order.
    p_interp(r) = max precision over points with recall >= r; integrate
    over [0, 1] by evaluating at interval midpoints.
    """
    points = []
    tp = 0
    for k, hit in enumerate(ranked_hits, 1):
        tp += hit
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    breaks = sorted({Fraction(0), Fraction(1), *(r for r, _ in points)})
    area = Fraction(0)
    for lo, hi in zip(breaks, breaks[1:]):
        mid = (lo + hi) / 2
        ps = [p for r, p in points if r >= mid]
        area += (hi - lo) * (max(ps) if ps else 0)
    return area


@dataclass
class RandomScene:
    preds: list[Detection]
    gts: list[Annotation]


def random_scene(rng: random.Random, max_boxes: int = 6, classes: int = 2) -> RandomScene:
    tax = list(default_taxonomy())[:classes]

    def box():
        x0, y0 = rng.randrange(0, CANVAS - 4), rng.randrange(0, CANVAS - 4)
        return BoundingBox(x0, y0, rng.randrange(x0 + 1, min(CANVAS, x0 + 30) + 1),
                           rng.randrange(y0 + 1, min(CANVAS, y0 + 30) + 1))

    gts = [Annotation(rng.choice(tax), box()) for _ in range(rng.randint(0, max_boxes))]
    preds = []
    for _ in range(rng.randint(0, max_boxes)):
        if gts and rng.random() < 0.6:
            g = rng.choice(gts)
            dx, dy = rng.randint(-3, 3), rng.randint(-3, 3)
            b = g.box
            nb = BoundingBox(
                min(max(b.x_min + dx, 0), CANVAS - 1), min(max(b.y_min + dy, 0), CANVAS - 1),
                min(max(b.x_max + dx, 1), CANVAS), min(max(b.y_max + dy, 1), CANVAS),
            )
            if nb.x_max <= nb.x_min or nb.y_max <= nb.y_min:
                nb = b
            label = g.label if rng.random() < 0.85 else rng.choice(tax)
        else:
            nb, label = box(), rng.choice(tax)
        # coarse confidences make ties common
        preds.append(Detection(nb, label, rng.choice([0.2, 0.4, 0.5, 0.7, 0.9, 0.95])))
    return RandomScene(preds, gts)


def brute_force_search(vectors: np.ndarray, keys: list[tuple[str, int]], query: np.ndarray, k: int):
    """Full scan: score every row, sort by (-similarity, doc_id, passage_index)."""
    sims = vectors @ query
    scored = sorted(zip(sims.tolist(), keys), key=lambda t: (-t[0], t[1]))
    return [(key, s) for s, key in scored[:k]]


def dyadic_unit_vectors(rng: np.random.Generator, n: int, dim: int = 256) -> np.ndarray:
    """Exactly unit-norm vectors whose dot products are exact in float64.

    Each row has 4, 16, 64 or 256 non-zeros (at most ``dim``) of magnitude 1/2, 1/4, 1/8 or
    1/16, so every pairwise dot product is a multiple of 1/256 and no
    summation order can change a score or hide a tie.
    """
    out = np.zeros((n, dim))
    for i in range(n):
        nnz = int(rng.choice([m for m in (4, 16, 64, 256) if m <= dim]))
        cols = rng.choice(dim, size=nnz, replace=False)
        out[i, cols] = rng.choice([-1.0, 1.0], size=nnz) / np.sqrt(nnz)
    return out
