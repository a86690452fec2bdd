"""Feature pyramid (P3-P7), anchor grids and the shared detection heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from tfd.backbone import he_kernel, param_seed
from tfd.ops import add, conv2d, relu, upsample_nearest2
from tfd.tensor import DimensionError, Tensor

LEVELS = (3, 4, 5, 6, 7)


@dataclass
class Pyramid:
    p3: Tensor
    p4: Tensor
    p5: Tensor
    p6: Tensor
    p7: Tensor

    def levels(self) -> list[Tensor]:
        return [self.p3, self.p4, self.p5, self.p6, self.p7]


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple[float, ...] = (1.0, 2.0 ** (-1.0 / 3.0), 2.0 ** (-2.0 / 3.0))
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    strides: tuple[int, ...] = (8, 16, 32, 64, 128)
    base_sizes: tuple[float, ...] = (32.0, 64.0, 128.0, 256.0, 512.0)

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass
class HeadOutput:
    """Per-level raw head outputs: ``cls[i]`` is ``(1, h, w, A*K)``, ``box[i]`` is ``(1, h, w, A*4)``."""

    cls: list[Tensor]
    box: list[Tensor]
    num_classes: int
    shapes: list[tuple[int, int]] = field(default_factory=list)


def pyramid_param_shapes(tap_channels: Mapping[int, int], d: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for b in (3, 4, 5):
        shapes[f"pyramid.lateral{b}.kernel"] = (1, 1, tap_channels[b], d)
        shapes[f"pyramid.lateral{b}.bias"] = (d,)
        shapes[f"pyramid.smooth{b}.kernel"] = (3, 3, d, d)
        shapes[f"pyramid.smooth{b}.bias"] = (d,)
    for name in ("p6", "p7"):
        shapes[f"pyramid.{name}.kernel"] = (3, 3, d, d)
        shapes[f"pyramid.{name}.bias"] = (d,)
    return shapes


def head_param_shapes(d: int, depth: int, anchors: int, num_classes: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for sub, width in (("cls", anchors * num_classes), ("box", anchors * 4)):
        for i in range(1, depth + 1):
            shapes[f"head.{sub}.conv{i}.kernel"] = (3, 3, d, d)
            shapes[f"head.{sub}.conv{i}.bias"] = (d,)
        shapes[f"head.{sub}.out.kernel"] = (3, 3, d, width)
        shapes[f"head.{sub}.out.bias"] = (width,)
    return shapes


def init_from_shapes(shapes: Mapping[str, tuple[int, ...]], seed: int, dtype=np.float64, prior: float = 0.01) -> dict[str, Tensor]:
    """He-normal kernels and zero biases, except the head outputs.

    Head output kernels are N(0, 0.01^2); the classification output bias is
    set so every anchor starts with foreground probability ``prior``.
    """
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".kernel"):
            if name.startswith("head.") and ".out." in name:
                arr = param_seed(seed, name).standard_normal(shape) * 0.01
            else:
                arr = he_kernel(seed, name, shape)
        elif name == "head.cls.out.bias":
            arr = np.full(shape, -math.log((1.0 - prior) / prior))
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(np.asarray(arr, dtype=dtype), name=name)
    return params


def check_tap_shapes(b3: Tensor, b4: Tensor, b5: Tensor) -> None:
    h3, w3 = b3.shape[1:3]
    for t, k, label in ((b4, 2, "b4"), (b5, 4, "b5")):
        if t.shape[1] * k != h3:
            raise DimensionError(f"{label} height {t.shape[1]} breaks the halving chain from b3 height {h3}", "height")
        if t.shape[2] * k != w3:
            raise DimensionError(f"{label} width {t.shape[2]} breaks the halving chain from b3 width {w3}", "width")
    # p7 = b3 / 16 must be a whole, nonzero size
    for size, axis in ((h3, "height"), (w3, "width")):
        if size < 16 or size % 16:
            raise DimensionError(f"b3 {axis} {size} must be a positive multiple of 16 for five pyramid levels", axis)


def build_pyramid(b3: Tensor, b4: Tensor, b5: Tensor, params: Mapping[str, Tensor]) -> Pyramid:
    """Lateral 1x1 projections, top-down nearest upsampling + add, 3x3 smoothing; P6/P7 by stride-2 convs."""
    check_tap_shapes(b3, b4, b5)

    def conv(x, name, stride=1):
        return conv2d(x, params[f"pyramid.{name}.kernel"], params[f"pyramid.{name}.bias"], stride=stride)

    m5 = conv(b5, "lateral5")
    m4 = add(conv(b4, "lateral4"), upsample_nearest2(m5))
    m3 = add(conv(b3, "lateral3"), upsample_nearest2(m4))
    p5 = conv(m5, "smooth5")
    p6 = conv(p5, "p6", stride=2)
    p7 = conv(relu(p6), "p7", stride=2)
    return Pyramid(conv(m3, "smooth3"), conv(m4, "smooth4"), p5, p6, p7)


def head_params(params: Mapping[str, Tensor], sub: str) -> dict[str, Tensor]:
    """The parameters of one head subnet; the same objects are used at every level."""
    prefix = f"head.{sub}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def run_subnet(x: Tensor, sub_params: Mapping[str, Tensor], depth: int) -> Tensor:
    for i in range(1, depth + 1):
        x = relu(conv2d(x, sub_params[f"conv{i}.kernel"], sub_params[f"conv{i}.bias"]))
    return conv2d(x, sub_params["out.kernel"], sub_params["out.bias"])


def run_heads(pyramid: Pyramid, params: Mapping[str, Tensor], depth: int, num_classes: int) -> HeadOutput:
    cls_p = head_params(params, "cls")
    box_p = head_params(params, "box")
    cls_out, box_out, shapes = [], [], []
    for p in pyramid.levels():
        cls_out.append(run_subnet(p, cls_p, depth))
        box_out.append(run_subnet(p, box_p, depth))
        shapes.append(p.shape[1:3])
    return HeadOutput(cls_out, box_out, num_classes, shapes)


def level_anchors(height: int, width: int, stride: int, base_size: float, config: AnchorConfig) -> np.ndarray:
    """Anchors ``(x1, y1, x2, y2)`` for one level in (y, x, anchor) order.

    Centers sit at ``(i + 0.5) * stride``; anchor ``a`` cycles scales fastest,
    then aspect ratios (height / width).
    """
    shapes = []
    for ratio in config.aspect_ratios:
        for s in config.scales:
            size = base_size * s
            w = size / math.sqrt(ratio)
            h = size * math.sqrt(ratio)
            shapes.append((w, h))
    wh = np.asarray(shapes)
    cy = (np.arange(height) + 0.5) * stride
    cx = (np.arange(width) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
    half = wh[None, :, :] / 2.0
    boxes = np.concatenate([centers - half, centers + half], axis=-1)
    return boxes.reshape(-1, 4)


def generate_anchors(level_shapes, config: AnchorConfig = AnchorConfig()) -> tuple[np.ndarray, np.ndarray]:
    """All anchors for the given per-level ``(h, w)`` list, plus each anchor's level."""
    boxes, levels = [], []
    for i, (h, w) in enumerate(level_shapes):
        a = level_anchors(h, w, config.strides[i], config.base_sizes[i], config)
        boxes.append(a)
        levels.append(np.full(len(a), LEVELS[i]))
    return np.concatenate(boxes), np.concatenate(levels)


def anchor_level_shapes(image_height: int, image_width: int) -> list[tuple[int, int]]:
    return [(image_height // s, image_width // s) for s in (8, 16, 32, 64, 128)]


def dump_anchors(path, anchors: np.ndarray, levels: np.ndarray) -> None:
    """Debug dump, one ``level cx cy w h`` line per anchor."""
    lines = []
    for (x1, y1, x2, y2), lvl in zip(anchors, levels):
        lines.append(f"{int(lvl)} {(x1 + x2) / 2:.6f} {(y1 + y2) / 2:.6f} {x2 - x1:.6f} {y2 - y1:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
