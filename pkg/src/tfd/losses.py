"""Focal loss, anchor assignment, box coding and smooth-L1 regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tfd.tensor import Tensor, apply_op

PROB_CLAMP = 1e-7
BOX_STD = np.array([0.1, 0.1, 0.2, 0.2])
SMOOTH_L1_BETA = 1.0 / 9.0

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class FocalLossParams:
    gamma: float = 2.0
    alpha: tuple[float, ...] = (0.25,)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if any(not 0 < a < 1 for a in self.alpha):
            raise ValueError(f"alpha values must lie in (0, 1), got {self.alpha}")


def focal_loss(p_prime, alpha_t, gamma: float = 2.0):
    """``-alpha_t * (1 - p')**gamma * log(p')`` with ``p'`` clamped at 1e-7.

    ``p_prime`` is the predicted probability of the true label. Works on
    scalars and arrays alike.
    """
    p = np.asarray(p_prime, dtype=np.float64)
    out = -np.asarray(alpha_t) * (1.0 - p) ** gamma * np.log(np.maximum(p, PROB_CLAMP))
    return float(out) if out.ndim == 0 else out


def alpha_from_frequency(class_counts) -> np.ndarray:
    """Per-class alpha proportional to inverse frequency, scaled to mean 0.25."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("class_counts must be a non-empty 1-D sequence")
    zero = np.flatnonzero(counts <= 0)
    if zero.size:
        raise ValueError(
            f"classes {zero.tolist()} have no examples; drop them from the class list or add data"
        )
    inv = 1.0 / counts
    return 0.25 * inv / inv.mean()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(z) -> np.ndarray:
    return _sigmoid(np.asarray(z, dtype=np.float64))


def sigmoid_focal_loss(logits: Tensor, labels: np.ndarray, alpha, gamma: float = 2.0, normalizer: float | None = None) -> Tensor:
    """Classification loss over all anchors and classes.

    ``logits`` is ``(A, K)``. ``labels[a]`` is the target class of anchor
    ``a``, ``NEGATIVE`` for background or ``IGNORE``. Each (anchor, class)
    pair is a binary problem: the target class uses ``p' = p`` with weight
    ``alpha[c]``, every other class uses ``p' = 1 - p`` with ``1 - alpha[c]``.
    The sum is divided by ``normalizer`` (default: number of positive anchors,
    at least 1).
    """
    z = logits.data
    a_count, k = z.shape
    labels = np.asarray(labels)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (k,))
    valid = labels != IGNORE
    onehot = np.zeros((a_count, k), dtype=bool)
    pos_rows = np.flatnonzero(labels >= 0)
    onehot[pos_rows, labels[pos_rows]] = True
    if normalizer is None:
        normalizer = max(1.0, float(pos_rows.size))

    zz = z.astype(np.float64)
    p = _sigmoid(zz)
    pt = np.where(onehot, p, 1.0 - p)
    at = np.where(onehot, alpha, 1.0 - alpha)
    pc = np.maximum(pt, PROB_CLAMP)
    logp = np.log(pc)
    mod = (1.0 - pt) ** gamma
    elem = -at * mod * logp * valid[:, None]
    loss = np.asarray(elem.sum() / normalizer, dtype=z.dtype)

    def backward(g):
        # d/dz of -a (1-p')^g log p', with dp'/dz = +/- p'(1-p')
        unclamped = pt >= PROB_CLAMP
        dz = at * (gamma * mod * pt * logp - mod * (1.0 - pt) * unclamped)
        dz = np.where(onehot, dz, -dz) * valid[:, None]
        return ((g * dz / normalizer).astype(z.dtype),)

    return apply_op(loss, (logits,), backward)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` boxes in ``(x1, y1, x2, y2)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, iou_fg: float = 0.5, iou_bg: float = 0.4) -> np.ndarray:
    """Assign each anchor to a gt index (positive), ``NEGATIVE`` or ``IGNORE``.

    Positive iff max IoU >= ``iou_fg`` (argmax gt, ties to the lowest gt
    index); negative iff max IoU < ``iou_bg``. Afterwards each gt with any
    overlap has its best anchor (lowest anchor index on ties) forced positive;
    when two gts share a best anchor the lower gt index wins.
    """
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if not len(gt_boxes):
        return np.full(n, NEGATIVE, dtype=np.int64)
    iou = box_iou_matrix(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    out = np.full(n, IGNORE, dtype=np.int64)
    out[best_iou < iou_bg] = NEGATIVE
    pos = best_iou >= iou_fg
    out[pos] = best_gt[pos]
    best_anchor = iou.argmax(axis=0)
    for g in range(len(gt_boxes) - 1, -1, -1):
        if iou[best_anchor[g], g] > 0:
            out[best_anchor[g]] = g
    return out


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Regression targets ``(dx, dy, dw, dh)`` divided by ``BOX_STD``."""
    anchors = np.asarray(anchors, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    d = np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)
    return d / BOX_STD


MAX_LOG_RATIO = np.log(1000.0 / 16)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; log size ratios are capped to keep ``exp`` finite."""
    anchors = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64) * BOX_STD
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + d[:, 0] * aw
    cy = ay + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], MAX_LOG_RATIO))
    h = ah * np.exp(np.minimum(d[:, 3], MAX_LOG_RATIO))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def smooth_l1(diff, beta: float = SMOOTH_L1_BETA):
    a = np.abs(diff)
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def box_regression_loss(pred_deltas: Tensor, target_deltas: np.ndarray, positive: np.ndarray | None = None, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Smooth-L1 summed over the 4 coordinates, averaged over positive anchors.

    ``pred_deltas`` is ``(A, 4)``; ``positive`` selects the rows that count
    (default: all rows). No positives gives a loss of exactly 0.
    """
    p = pred_deltas.data
    target = np.asarray(target_deltas, dtype=np.float64)
    if positive is None:
        positive = np.ones(len(p), dtype=bool)
    positive = np.asarray(positive, dtype=bool)
    count = int(positive.sum())
    diff = np.where(positive[:, None], p.astype(np.float64) - target, 0.0)
    loss = np.asarray(smooth_l1(diff, beta).sum() / max(count, 1), dtype=p.dtype)

    def backward(g):
        grad = np.where(np.abs(diff) < beta, diff / beta, np.sign(diff)) * positive[:, None]
        return ((g * grad / max(count, 1)).astype(p.dtype),)

    return apply_op(loss, (pred_deltas,), backward)
