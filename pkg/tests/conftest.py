from fractions import Fraction

import numpy as np
import pytest

from tfd.detection import Detection, GroundTruthBox, iou
from tfd.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rand_tensor(rng, shape, requires_grad=False, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=requires_grad)


# --- naive loop oracles, written independently of the vectorized kernels ---

def conv2d_loop(x, k, b, stride, padding):
    n, h, w, c = x.shape
    kh, kw, cin, cout = k.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        top, left = ph // 2, pw // 2
    else:
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        top = left = 0
    out = np.zeros((n, ho, wo, cout))
    for bi in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    s = 0.0 if b is None else b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            yi = i * stride + di - top
                            xj = j * stride + dj - left
                            if 0 <= yi < h and 0 <= xj < w:
                                for ci in range(c):
                                    s += x[bi, yi, xj, ci] * k[di, dj, ci, o]
                    out[bi, i, j, o] = s
    return out


def maxpool_loop(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for bi in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for ci in range(c):
                    out[bi, i, j, ci] = max(x[bi, 2 * i + a, 2 * j + d, ci] for a in range(2) for d in range(2))
    return out


def upsample_loop(x):
    n, h, w, c = x.shape
    out = np.zeros((n, 2 * h, 2 * w, c))
    for i in range(2 * h):
        for j in range(2 * w):
            out[:, i, j, :] = x[:, i // 2, j // 2, :]
    return out


def fuse_loop(maps, w, b):
    """out[y, x, k] = sum_j w[k, j] * maps[j][y, x, k] + b[k], one cell at a time."""
    n, h, wd, c = maps[0].shape
    out = np.zeros((n, h, wd, c))
    for bi in range(n):
        for y in range(h):
            for x in range(wd):
                for k in range(c):
                    s = 0.0 if b is None else b[k]
                    for j in range(len(maps)):
                        s += w[k, j] * maps[j][bi, y, x, k]
                    out[bi, y, x, k] = s
    return out


def ap_oracle(dets, gts, iou_min=0.7):
    """Sweep every distinct score threshold, rematch from scratch, then take the envelope area."""
    def match(subset):
        subset = sorted(subset, key=lambda d: -d.score)
        used = set()
        tp = 0
        for d in subset:
            cands = [(iou(d.box, g.box), -gi) for gi, g in enumerate(gts)
                     if g.frame_index == d.frame_index and gi not in used]
            if cands:
                v, neg = max(cands)
                if v >= iou_min:
                    used.add(-neg)
                    tp += 1
        return tp, len(subset)

    if not gts:
        return Fraction(1 if not dets else 0)
    curve = []
    for t in sorted({d.score for d in dets}, reverse=True):
        chosen = [d for d in dets if d.score >= t]
        tp, n = match(chosen)
        curve.append((Fraction(tp, len(gts)), Fraction(tp, n)))
    area = Fraction(0)
    prev = Fraction(0)
    for i, (r, _) in enumerate(curve):
        area += (r - prev) * max(p for _, p in curve[i:])
        prev = r
    return area


def staircase_case(seed):
    """Random single-class detections and ground truth over two frames, at most 20 boxes."""
    rng = np.random.default_rng(seed)
    n_gt = int(rng.integers(1, 8))
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 30, size=2)
        gts.append(GroundTruthBox(int(rng.integers(2)), 0, (x, y, x + rng.uniform(5, 15), y + rng.uniform(5, 15))))
    dets = []
    for _ in range(int(rng.integers(0, 20 - n_gt + 1))):
        if rng.random() < 0.6:
            g = gts[int(rng.integers(len(gts)))]
            b = np.array(g.box) + rng.normal(scale=1.0, size=4)
            box = (b[0], b[1], max(b[2], b[0] + 1), max(b[3], b[1] + 1))
            frame = g.frame_index
        else:
            x, y = rng.uniform(0, 40, size=2)
            box = (x, y, x + 8, y + 8)
            frame = int(rng.integers(2))
        # coarse scores force plenty of ties
        dets.append(Detection(frame, 0, box, float(rng.integers(1, 6)) / 5))
    return dets, gts
