"""Detections, ground truth boxes, decoding and non-maximum suppression.

CSV formats (shared with external analysis tools):

* detections: ``frame,class,x1,y1,x2,y2,score``
* ground truth: ``frame,class,x1,y1,x2,y2``
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tfd.losses import decode_boxes, sigmoid
from tfd.pyramid import HeadOutput

Box = tuple[float, float, float, float]

DET_HEADER = ["frame", "class", "x1", "y1", "x2", "y2", "score"]
GT_HEADER = ["frame", "class", "x1", "y1", "x2", "y2"]


@dataclass(frozen=True)
class Detection:
    frame_index: int
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthBox:
    frame_index: int
    class_id: int
    box: Box

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"ground truth box must have positive area, got {self.box}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy single-class NMS.

    Boxes are visited by descending score (ties: earlier input first); a box
    is dropped when its IoU with any already kept box is >= ``iou_thresh``.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    if not order:
        return []
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        kept.append(dets[order[pos]])
        rest = slice(pos + 1, None)
        iw = np.minimum(x2[pos], x2[rest]) - np.maximum(x1[pos], x1[rest])
        ih = np.minimum(y2[pos], y2[rest]) - np.maximum(y1[pos], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        overlap = inter / (areas[pos] + areas[rest] - inter)
        suppressed[rest] |= overlap >= iou_thresh
    return kept


def batched_nms(dets: Sequence[Detection], iou_thresh: float = 0.5, max_detections: int | None = 100) -> list[Detection]:
    """Per-class NMS, then keep the ``max_detections`` best overall."""
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    kept = []
    for cls in sorted(by_class):
        kept.extend(nms(by_class[cls], iou_thresh))
    kept.sort(key=lambda d: -d.score)
    return kept if max_detections is None else kept[:max_detections]


def decode(
    head: HeadOutput,
    anchors: Sequence[np.ndarray],
    image_size: tuple[int, int],
    score_thresh: float = 0.05,
    topk_per_level: int = 1000,
    frame_index: int = 0,
) -> list[Detection]:
    """Turn raw head outputs into scored boxes (before NMS).

    ``anchors[i]`` holds the level-``i`` anchors in the head's (y, x, anchor)
    order. Scores are per-class sigmoids; boxes are clipped to the image.
    """
    height, width = image_size
    k = head.num_classes
    out: list[Detection] = []
    for cls_t, box_t, level_anchors in zip(head.cls, head.box, anchors):
        scores = sigmoid(cls_t.data.reshape(-1, k))
        deltas = box_t.data.reshape(-1, 4)
        if len(scores) != len(level_anchors):
            raise ValueError(f"head has {len(scores)} anchor rows, anchor grid has {len(level_anchors)}")
        flat = scores.reshape(-1)
        cand = np.flatnonzero(flat > score_thresh)
        if cand.size > topk_per_level:
            top = np.argsort(-flat[cand], kind="stable")[:topk_per_level]
            cand = np.sort(cand[top])
        if not cand.size:
            continue
        rows, classes = np.divmod(cand, k)
        boxes = decode_boxes(level_anchors[rows], deltas[rows])
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
        for (x1, y1, x2, y2), c, s in zip(boxes, classes, flat[cand]):
            if x2 > x1 and y2 > y1:
                out.append(Detection(frame_index, int(c), (float(x1), float(y1), float(x2), float(y2)), float(s)))
    return out


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DET_HEADER)
        for d in dets:
            w.writerow([d.frame_index, d.class_id, *(repr(float(v)) for v in d.box), repr(float(d.score))])


def write_ground_truth(path, gts: Iterable[GroundTruthBox]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GT_HEADER)
        for g in gts:
            w.writerow([g.frame_index, g.class_id, *(repr(float(v)) for v in g.box)])


def _rows(path, header):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(header) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        yield from reader


def read_detections(path) -> list[Detection]:
    return [
        Detection(int(r["frame"]), int(r["class"]), (float(r["x1"]), float(r["y1"]), float(r["x2"]), float(r["y2"])), float(r["score"]))
        for r in _rows(path, DET_HEADER)
    ]


def read_ground_truth(path) -> list[GroundTruthBox]:
    return [
        GroundTruthBox(int(r["frame"]), int(r["class"]), (float(r["x1"]), float(r["y1"]), float(r["x2"]), float(r["y2"])))
        for r in _rows(path, GT_HEADER)
    ]
