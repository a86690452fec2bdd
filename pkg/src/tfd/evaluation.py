"""Average precision at a fixed IoU, mAP, and precision-recall curve export.

AP is the area under the all-points interpolated (precision envelope)
precision-recall curve. Counts are integers, so precision and recall are
rationals; the area is accumulated with :class:`fractions.Fraction` and only
rounded once at the end.
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from tfd.detection import Detection, GroundTruthBox, iou, read_detections, read_ground_truth

logger = logging.getLogger(__name__)

EVAL_IOU = 0.7


@dataclass
class PRCurve:
    class_id: int
    recall: list[float] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    ap: float = 0.0

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall, self.precision))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_min: float = EVAL_IOU):
    """Greedy one-to-one matching for a single class.

    Detections are visited by descending score (ties: input order). Each takes
    the highest-IoU still-unmatched gt in its frame (ties: lowest gt index)
    if that IoU is >= ``iou_min``. Returns ``(ordered_dets, tp_flags)``.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_frame: dict[int, list[int]] = defaultdict(list)
    for gi, g in enumerate(gts):
        by_frame[g.frame_index].append(gi)
    taken = [False] * len(gts)
    ordered, flags = [], []
    for di in order:
        d = dets[di]
        best, best_iou = -1, -1.0
        for gi in by_frame.get(d.frame_index, ()):
            if taken[gi]:
                continue
            v = iou(d.box, gts[gi].box)
            if v > best_iou:
                best, best_iou = gi, v
        hit = best >= 0 and best_iou >= iou_min
        if hit:
            taken[best] = True
        ordered.append(d)
        flags.append(hit)
    return ordered, flags


def _staircase(scores: Sequence[float], flags: Sequence[bool], num_gt: int):
    """PR points emitted after each group of equal scores, as exact fractions."""
    points = []
    tp = fp = 0
    for i, hit in enumerate(flags):
        if hit:
            tp += 1
        else:
            fp += 1
        if i + 1 == len(flags) or scores[i + 1] != scores[i]:
            points.append((Fraction(tp, num_gt), Fraction(tp, tp + fp)))
    return points


def envelope_area(points: Sequence[tuple[Fraction, Fraction]]) -> Fraction:
    """Area under the precision envelope of recall-ordered ``(recall, precision)`` points."""
    area = Fraction(0)
    best = Fraction(0)
    # walk backwards so `best` is the max precision at recall >= current
    prev_recalls = [Fraction(0)] + [r for r, _ in points[:-1]]
    widths = defaultdict(Fraction)
    for (r, p), r0 in zip(reversed(points), reversed(prev_recalls)):
        best = max(best, p)
        if r != r0:
            widths[best] += r - r0
    for p, w in widths.items():
        area += p * w
    return area


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_min: float = EVAL_IOU, class_id: int = 0) -> tuple[float, PRCurve]:
    """AP for one class. Empty gts score 1 without detections and 0 with any."""
    if not gts:
        ap = 1.0 if not dets else 0.0
        curve = PRCurve(class_id, ap=ap)
        if dets:
            curve.recall = [0.0]
            curve.precision = [0.0]
        return ap, curve
    ordered, flags = match_detections(dets, gts, iou_min)
    points = _staircase([d.score for d in ordered], flags, len(gts))
    area = envelope_area(points)
    ap = float(area)
    curve = PRCurve(class_id, [float(r) for r, _ in points], [float(p) for _, p in points], ap)
    return ap, curve


def exact_average_precision(dets, gts, iou_min: float = EVAL_IOU) -> Fraction:
    if not gts:
        return Fraction(1 if not dets else 0)
    ordered, flags = match_detections(dets, gts, iou_min)
    return envelope_area(_staircase([d.score for d in ordered], flags, len(gts)))


def mean_ap(per_class: Mapping[int, float | None]) -> float:
    """Arithmetic mean over classes; ``None`` marks a class absent from the ground truth."""
    vals = [v for v in per_class.values() if v is not None]
    if not vals:
        raise ValueError("mean_ap needs at least one class with ground truth")
    return sum(vals) / len(vals)


@dataclass
class EvalResult:
    per_class: dict[int, float | None]
    curves: list[PRCurve]
    mAP: float
    unmatched_classes: list[int] = field(default_factory=list)


def evaluate_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_min: float = EVAL_IOU) -> EvalResult:
    """Per-class AP and mAP over all classes present in the ground truth.

    Detections of classes with no ground truth are all false positives; they
    are reported (AP ``None``) with a warning and left out of the mean.
    """
    det_by = defaultdict(list)
    gt_by = defaultdict(list)
    for d in dets:
        det_by[d.class_id].append(d)
    for g in gts:
        gt_by[g.class_id].append(g)
    per_class: dict[int, float | None] = {}
    curves = []
    for cls in sorted(gt_by):
        ap, curve = average_precision(det_by.get(cls, []), gt_by[cls], iou_min, cls)
        per_class[cls] = ap
        curves.append(curve)
    stray = sorted(set(det_by) - set(gt_by))
    for cls in stray:
        logger.warning("class %d has %d detections but no ground truth; counted as false positives", cls, len(det_by[cls]))
        per_class[cls] = None
    return EvalResult(per_class, curves, mean_ap(per_class) if gt_by else 0.0, stray)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def export_pr(curves: Sequence[PRCurve], path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (class, recall, precision) and ``<path>.svg`` (one polyline per class)."""
    base = Path(path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "recall", "precision"])
        for c in curves:
            for r, p in c.points():
                w.writerow([c.class_id, repr(float(r)), repr(float(p))])

    size, pad = 400, 40
    span = size - 2 * pad

    def xy(r, p):
        return f"{pad + r * span:.2f},{size - pad - p * span:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#444"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {size / 2})">precision</text>',
    ]
    for i, c in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(xy(r, p) for r, p in c.points())
        parts.append(f'<polyline data-class="{c.class_id}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{size - pad - 4}" y="{pad + 14 * (i + 1)}" text-anchor="end" font-size="11" fill="{color}">class {c.class_id}: AP {c.ap:.3f}</text>')
    parts.append("</svg>")
    svg_path.write_text("\n".join(parts) + "\n")
    return csv_path, svg_path


def evaluate_files(dets_csv, gt_csv, out_dir, iou_min: float = EVAL_IOU) -> EvalResult:
    """Evaluate a detections CSV against a ground-truth CSV.

    Writes ``metrics.csv`` (per-class AP plus an ``mAP`` row) and the
    ``pr.csv`` / ``pr.svg`` curve exports into ``out_dir``.
    """
    result = evaluate_detections(read_detections(dets_csv), read_ground_truth(gt_csv), iou_min)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "ap"])
        for cls, ap in sorted(result.per_class.items()):
            w.writerow([cls, "" if ap is None else repr(ap)])
        w.writerow(["mAP", repr(result.mAP)])
    export_pr(result.curves, out / "pr")
    return result
