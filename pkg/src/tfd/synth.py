"""Deterministic synthetic traffic-like video sequences with ground truth.

Objects are flat-colored shapes (one shape/color family per class) moving on
a smooth textured background. Knobs cover the usual video detection
nuisances: per-frame occluders, motion blur along the velocity direction,
sensor noise and object size.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from tfd.detection import GroundTruthBox, read_ground_truth, write_ground_truth
from tfd.serialize import load_tensor, save_tensor
from tfd.tensor import Tensor

SHAPES = ("rectangle", "ellipse", "cross", "ring")
CLASS_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.25, 0.75, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.85, 0.20],
])


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (128, 128)
    length: int = 40
    num_objects: tuple[int, int] = (1, 4)
    num_classes: int = 3
    velocity: tuple[float, float] = (0.5, 2.0)
    acceleration: float = 0.15
    size: tuple[float, float] = (16.0, 36.0)
    aspect: tuple[float, float] = (0.6, 1.0)
    color_jitter: float = 0.08
    occlusion_rate: float = 0.3
    occlusion_extent: tuple[float, float] = (0.3, 0.7)
    blur_kernel_len: int = 3
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "num_objects", "velocity", "size", "aspect", "occlusion_extent"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        h, w = self.image_size
        if self.size[1] >= min(h, w):
            raise ValueError(f"object size up to {self.size[1]} px does not fit in a {h}x{w} image")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
        if self.size[0] <= 0 or self.size[0] > self.size[1]:
            raise ValueError(f"bad size range {self.size}")
        if self.num_objects[0] < 0 or self.num_objects[0] > self.num_objects[1]:
            raise ValueError(f"bad num_objects range {self.num_objects}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must be in [0, 1]")
        if self.blur_kernel_len < 0 or self.length < 1:
            raise ValueError("blur_kernel_len must be >= 0 and length >= 1")

    def with_seed(self, seed: int) -> "SceneConfig":
        return SceneConfig(**{**asdict(self), "seed": int(seed)})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Sequence:
    frames: list[Tensor]
    gt: list[list[GroundTruthBox]]
    name: str = "seq"
    config: SceneConfig | None = None

    @property
    def length(self) -> int:
        return len(self.frames)

    def all_gt(self) -> list[GroundTruthBox]:
        return [g for frame in self.gt for g in frame]


@dataclass
class FrameWindow:
    frames: list[Tensor]
    indices: list[int]
    replicated: list[bool]
    center: int

    @property
    def radius(self) -> int:
        return (len(self.frames) - 1) // 2


@dataclass
class _Object:
    cls: int
    w: float
    h: float
    cx: float
    cy: float
    vx: float
    vy: float
    color: np.ndarray
    speed_lo: float
    speed_hi: float


def _smooth_field(rng: np.random.Generator, h: int, w: int, coarse: int = 5) -> np.ndarray:
    grid = rng.random((coarse, coarse, 3))
    ys = np.linspace(0, coarse - 1, h)
    xs = np.linspace(0, coarse - 1, w)
    y0 = np.minimum(ys.astype(int), coarse - 2)
    x0 = np.minimum(xs.astype(int), coarse - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = 0.35 + 0.25 * _smooth_field(rng, h, w)
    texture = 0.04 * (rng.random((h, w, 1)) - 0.5)
    return np.clip(base + texture, 0, 1)


def shape_mask(shape: str, h: int, w: int, cx: float, cy: float, bw: float, bh: float) -> np.ndarray:
    """Binary coverage of one shape, sampled at pixel centers."""
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    u = (xs - cx) / (bw / 2)
    v = (ys - cy) / (bh / 2)
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if shape == "rectangle":
        return inside
    if shape == "ellipse":
        return u * u + v * v <= 1
    if shape == "cross":
        return inside & ((np.abs(u) <= 0.4) | (np.abs(v) <= 0.4))
    if shape == "ring":
        return inside & ~((np.abs(u) <= 0.5) & (np.abs(v) <= 0.5))
    raise ValueError(f"unknown shape {shape!r}")


def _spawn(rng: np.random.Generator, cfg: SceneConfig) -> _Object:
    h, w = cfg.image_size
    cls = int(rng.integers(cfg.num_classes))
    long_side = rng.uniform(*cfg.size)
    short_side = max(cfg.size[0] * cfg.aspect[0], long_side * rng.uniform(*cfg.aspect))
    bw, bh = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    cx = rng.uniform(bw / 2, w - bw / 2)
    cy = rng.uniform(bh / 2, h - bh / 2)
    speed = rng.uniform(*cfg.velocity)
    angle = rng.uniform(0, 2 * np.pi)
    color = np.clip(CLASS_COLORS[cls] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
    return _Object(cls, bw, bh, cx, cy, speed * np.cos(angle), speed * np.sin(angle), color, cfg.velocity[0], cfg.velocity[1])


def _step(obj: _Object, rng: np.random.Generator, cfg: SceneConfig) -> None:
    h, w = cfg.image_size
    obj.vx += rng.uniform(-cfg.acceleration, cfg.acceleration)
    obj.vy += rng.uniform(-cfg.acceleration, cfg.acceleration)
    speed = np.hypot(obj.vx, obj.vy)
    if speed > 0:
        target = np.clip(speed, obj.speed_lo, obj.speed_hi)
        obj.vx *= target / speed
        obj.vy *= target / speed
    obj.cx += obj.vx
    obj.cy += obj.vy
    # reflect at the borders so the full box stays inside the image
    lo_x, hi_x = obj.w / 2, w - obj.w / 2
    lo_y, hi_y = obj.h / 2, h - obj.h / 2
    if obj.cx < lo_x:
        obj.cx, obj.vx = 2 * lo_x - obj.cx, abs(obj.vx)
    elif obj.cx > hi_x:
        obj.cx, obj.vx = 2 * hi_x - obj.cx, -abs(obj.vx)
    if obj.cy < lo_y:
        obj.cy, obj.vy = 2 * lo_y - obj.cy, abs(obj.vy)
    elif obj.cy > hi_y:
        obj.cy, obj.vy = 2 * hi_y - obj.cy, -abs(obj.vy)
    obj.cx = float(np.clip(obj.cx, lo_x, hi_x))
    obj.cy = float(np.clip(obj.cy, lo_y, hi_y))


def _render_object(obj: _Object, cfg: SceneConfig) -> np.ndarray:
    """Coverage in [0, 1], motion-blurred along the velocity direction."""
    h, w = cfg.image_size
    shape = SHAPES[obj.cls]
    n = cfg.blur_kernel_len
    speed = np.hypot(obj.vx, obj.vy)
    if n <= 1 or speed == 0:
        return shape_mask(shape, h, w, obj.cx, obj.cy, obj.w, obj.h).astype(np.float64)
    dx, dy = obj.vx / speed, obj.vy / speed
    acc = np.zeros((h, w))
    for t in np.arange(n) - (n - 1) / 2:
        acc += shape_mask(shape, h, w, obj.cx + t * dx, obj.cy + t * dy, obj.w, obj.h)
    return acc / n


def _occluder(obj: _Object, rng: np.random.Generator, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """A gray bar covering a random fraction of the object's box from one side."""
    h, w = cfg.image_size
    frac = rng.uniform(*cfg.occlusion_extent)
    x1, y1 = obj.cx - obj.w / 2, obj.cy - obj.h / 2
    x2, y2 = obj.cx + obj.w / 2, obj.cy + obj.h / 2
    side = int(rng.integers(4))
    if side == 0:
        x2 = x1 + frac * obj.w
    elif side == 1:
        x1 = x2 - frac * obj.w
    elif side == 2:
        y2 = y1 + frac * obj.h
    else:
        y1 = y2 - frac * obj.h
    # the bar overhangs the object across its other axis
    if side < 2:
        y1, y2 = y1 - 3, y2 + 3
    else:
        x1, x2 = x1 - 3, x2 + 3
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    mask = (xs >= x1) & (xs <= x2) & (ys >= y1) & (ys <= y2)
    return mask, np.full(3, rng.uniform(0.3, 0.7))


def generate(config: SceneConfig, name: str = "seq") -> Sequence:
    """Render one sequence; a pure function of ``config`` (including its seed)."""
    # separate streams so toggling occlusion or noise never moves the objects
    rng = np.random.default_rng([config.seed, 0])
    occ_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    h, w = config.image_size
    bg = _background(rng, h, w)
    count = int(rng.integers(config.num_objects[0], config.num_objects[1] + 1))
    objects = [_spawn(rng, config) for _ in range(count)]
    frames, gts = [], []
    for t in range(config.length):
        if t > 0:
            for obj in objects:
                _step(obj, rng, config)
        img = bg.copy()
        frame_gt = []
        for obj in objects:
            cover = _render_object(obj, config)[..., None]
            img = img * (1 - cover) + obj.color * cover
            if config.occlusion_rate > 0 and occ_rng.random() < config.occlusion_rate:
                mask, color = _occluder(obj, occ_rng, config)
                img[mask] = color
            frame_gt.append(GroundTruthBox(t, obj.cls, (obj.cx - obj.w / 2, obj.cy - obj.h / 2, obj.cx + obj.w / 2, obj.cy + obj.h / 2)))
        if config.noise_sigma > 0:
            img = img + noise_rng.normal(0.0, config.noise_sigma, img.shape)
        frames.append(Tensor(np.clip(img, 0.0, 1.0)[None]))
        gts.append(frame_gt)
    return Sequence(frames, gts, name, config)


def generate_many(config: SceneConfig, count: int, first_seed: int | None = None, prefix: str = "seq") -> list[Sequence]:
    base = config.seed if first_seed is None else first_seed
    return [generate(config.with_seed(base + i), f"{prefix}_{i:03d}") for i in range(count)]


def window(seq: Sequence, t: int, n: int) -> FrameWindow:
    """Frames ``t-n .. t+n``, replicating the first/last frame past the sequence ends."""
    if not 0 <= t < seq.length:
        raise IndexError(f"frame index {t} outside sequence of length {seq.length}")
    idx, rep = [], []
    for j in range(t - n, t + n + 1):
        clamped = min(max(j, 0), seq.length - 1)
        idx.append(clamped)
        rep.append(clamped != j)
    return FrameWindow([seq.frames[i] for i in idx], idx, rep, t)


def window_indices(length: int, t: int, n: int) -> list[int]:
    return [min(max(j, 0), length - 1) for j in range(t - n, t + n + 1)]


def split(sequences: Seq[Sequence], val_fraction: float = 0.2, seed: int = 0) -> tuple[list[Sequence], list[Sequence]]:
    """Hold out whole sequences for validation."""
    if len(sequences) < 2:
        raise ValueError(f"split needs at least 2 sequences, got {len(sequences)}")
    n_val = min(len(sequences) - 1, max(1, int(round(val_fraction * len(sequences)))))
    order = np.random.default_rng(seed).permutation(len(sequences))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(sequences) if i not in val_idx]
    val = [s for i, s in enumerate(sequences) if i in val_idx]
    return train, val


def save_sequence(seq: Sequence, directory) -> Path:
    """Write ``frame_%05d.bin`` files, ``gt.csv`` and a ``config.json`` echo."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        save_tensor(d / f"frame_{i:05d}.bin", f)
    write_ground_truth(d / "gt.csv", seq.all_gt())
    cfg = json.loads(seq.config.to_json()) if seq.config is not None else {}
    (d / "config.json").write_text(json.dumps({"name": seq.name, "length": seq.length, "scene": cfg}, indent=2, sort_keys=True))
    return d


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    files = sorted(d.glob("frame_*.bin"))
    if not files:
        raise FileNotFoundError(f"no frame_*.bin files in {d}")
    frames = [Tensor(load_tensor(f)) for f in files]
    gt: list[list[GroundTruthBox]] = [[] for _ in frames]
    gt_path = d / "gt.csv"
    if gt_path.exists():
        for g in read_ground_truth(gt_path):
            gt[g.frame_index].append(g)
    meta = json.loads((d / "config.json").read_text()) if (d / "config.json").exists() else {}
    scene = SceneConfig.from_dict(meta["scene"]) if meta.get("scene") else None
    return Sequence(frames, gt, meta.get("name", d.name), scene)


def load_sequences(directory) -> list[Sequence]:
    d = Path(directory)
    dirs = sorted(p for p in d.iterdir() if p.is_dir() and any(p.glob("frame_*.bin")))
    return [load_sequence(p) for p in dirs]
