"""Full detector: shared backbone per frame, temporal merge, pyramid, heads."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from tfd import backbone as bb
from tfd.detection import Detection, batched_nms, decode
from tfd.fusion import FusionMode, FusionParams, check_mode, concat_variant, fuse, init_fusion
from tfd.losses import (
    box_regression_loss,
    encode_boxes,
    match_anchors,
    sigmoid_focal_loss,
)
from tfd.ops import add, flatten_rows
from tfd.pyramid import (
    AnchorConfig,
    HeadOutput,
    anchor_level_shapes,
    build_pyramid,
    generate_anchors,
    head_param_shapes,
    init_from_shapes,
    pyramid_param_shapes,
    run_heads,
)
from tfd.tensor import DimensionError, Tensor

FRAME_MEAN = 0.45
FRAME_SCALE = 4.0


@dataclass(frozen=True)
class ModelConfig:
    n: int = 2
    fusion_mode: str = "learned_fusion"
    num_classes: int = 3
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    pyramid_channels: int = 64
    head_depth: int = 2
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    image_size: tuple[int, int] = (128, 128)
    fusion_init: str = "center"
    fusion_bias: bool = True
    prior: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "fusion_mode", check_mode(self.fusion_mode, self.n).value)
        object.__setattr__(self, "image_size", tuple(self.image_size))
        h, w = self.image_size
        for size, axis in ((h, "height"), (w, "width")):
            if size % 128:
                raise DimensionError(f"image {axis} {size} must be a multiple of 128 for the P3-P7 halving chain", axis)

    @property
    def window(self) -> int:
        return 2 * self.n + 1

    @property
    def mode(self) -> FusionMode:
        return FusionMode(self.fusion_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = bb.BackboneConfig(**d.get("backbone", {}))
        anchors = d.get("anchors", {})
        d["anchors"] = AnchorConfig(**{k: tuple(v) for k, v in anchors.items()})
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def lateral_inputs(config: ModelConfig) -> dict[int, int]:
    taps = config.backbone.tap_channels()
    if config.mode is FusionMode.CONCAT:
        return {b: c * config.window for b, c in taps.items()}
    return taps


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = config.backbone.in_channels
    for b, _, prefix in bb.conv_names(config.backbone):
        cout = config.backbone.block_channels[b - 1]
        shapes[f"{prefix}.kernel"] = (3, 3, cin, cout)
        shapes[f"{prefix}.bias"] = (cout,)
        cin = cout
    if config.mode is FusionMode.LEARNED:
        for b, c in config.backbone.tap_channels().items():
            shapes[f"fusion.b{b}.weights"] = (c, config.window)
            if config.fusion_bias:
                shapes[f"fusion.b{b}.bias"] = (c,)
    shapes.update(pyramid_param_shapes(lateral_inputs(config), config.pyramid_channels))
    shapes.update(head_param_shapes(config.pyramid_channels, config.head_depth, config.anchors.per_location, config.num_classes))
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Seeded initial parameters.

    Each parameter draws from its own name-keyed generator, so a baseline and
    a fused model built with the same seed share every non-fusion weight.
    """
    params = bb.init_params(config.backbone, seed, dtype)
    if config.mode is FusionMode.LEARNED:
        for b, c in config.backbone.tap_channels().items():
            fp = init_fusion(c, config.n, config.fusion_init, dtype, config.fusion_bias)
            params[f"fusion.b{b}.weights"] = fp.weights
            if fp.bias is not None:
                params[f"fusion.b{b}.bias"] = fp.bias
    shapes = pyramid_param_shapes(lateral_inputs(config), config.pyramid_channels)
    shapes.update(head_param_shapes(config.pyramid_channels, config.head_depth, config.anchors.per_location, config.num_classes))
    params.update(init_from_shapes(shapes, seed, dtype, config.prior))
    for name, t in params.items():
        t.name = name
    return params


def fusion_params(params: Mapping[str, Tensor], block: int) -> FusionParams:
    return FusionParams(params[f"fusion.b{block}.weights"], params.get(f"fusion.b{block}.bias"))


def preprocess(frame: Tensor, dtype=None) -> Tensor:
    data = (frame.data - FRAME_MEAN) * FRAME_SCALE
    return Tensor(data.astype(dtype) if dtype is not None else data)


def merge_taps(features: Sequence[bb.BackboneFeatures], params: Mapping[str, Tensor], config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Reduce the window's per-frame taps to one (b3, b4, b5) triple."""
    if len(features) != config.window:
        raise DimensionError(f"model expects {config.window} frames, got {len(features)}", "time")
    mode = config.mode
    out = []
    for b in bb.TAPS:
        maps = [f.tap(b) for f in features]
        if mode is FusionMode.SINGLE:
            out.append(maps[0])
        elif mode is FusionMode.CONCAT:
            out.append(concat_variant(maps))
        else:
            out.append(fuse(maps, fusion_params(params, b)))
    return tuple(out)


def heads_from_features(features: Sequence[bb.BackboneFeatures], params: Mapping[str, Tensor], config: ModelConfig) -> HeadOutput:
    b3, b4, b5 = merge_taps(features, params, config)
    pyr = build_pyramid(b3, b4, b5, params)
    return run_heads(pyr, params, config.head_depth, config.num_classes)


@dataclass
class Targets:
    labels: np.ndarray
    box_targets: np.ndarray
    positive: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


class AnchorSet:
    """Anchors for one input size, precomputed once and shared read-only."""

    def __init__(self, config: ModelConfig):
        self.shapes = anchor_level_shapes(*config.image_size)
        self.boxes, self.levels = generate_anchors(self.shapes, config.anchors)
        per_level = [h * w * config.anchors.per_location for h, w in self.shapes]
        bounds = np.cumsum([0] + per_level)
        self.per_level = [self.boxes[bounds[i]:bounds[i + 1]] for i in range(len(per_level))]

    def targets(self, gt_boxes: np.ndarray, gt_classes: np.ndarray) -> Targets:
        assign = match_anchors(self.boxes, gt_boxes)
        positive = assign >= 0
        labels = assign.copy()
        labels[positive] = np.asarray(gt_classes, dtype=np.int64)[assign[positive]]
        box_targets = np.zeros((len(self.boxes), 4))
        if positive.any():
            box_targets[positive] = encode_boxes(self.boxes[positive], np.asarray(gt_boxes)[assign[positive]])
        return Targets(labels, box_targets, positive)


def detection_loss(head: HeadOutput, targets: Targets, alpha, gamma: float = 2.0) -> tuple[Tensor, Tensor, Tensor]:
    """Focal classification loss + smooth-L1 box loss; returns (total, focal, box)."""
    logits = flatten_rows(head.cls, head.num_classes)
    deltas = flatten_rows(head.box, 4)
    if len(logits.data) != len(targets.labels):
        raise DimensionError(f"{len(logits.data)} head rows vs {len(targets.labels)} anchor targets", "anchors")
    focal = sigmoid_focal_loss(logits, targets.labels, alpha, gamma)
    box = box_regression_loss(deltas, targets.box_targets, targets.positive)
    return add(focal, box), focal, box


class Detector:
    """Parameters plus config, with per-frame extraction and per-window detection."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor], dtype=None):
        self.config = config
        self.params = dict(params)
        self.dtype = dtype if dtype is not None else next(iter(self.params.values())).dtype
        self.backbone_calls = 0

    @cached_property
    def anchors(self) -> AnchorSet:
        return AnchorSet(self.config)

    def extract(self, frame: Tensor, frame_index: int = -1) -> bb.BackboneFeatures:
        self.backbone_calls += 1
        return bb.extract(preprocess(frame, self.dtype), self.config.backbone, self.params, frame_index)

    def heads(self, features: Sequence[bb.BackboneFeatures]) -> HeadOutput:
        return heads_from_features(features, self.params, self.config)

    def detect(self, features: Sequence[bb.BackboneFeatures], frame_index: int, score_thresh: float = 0.05,
               topk_per_level: int = 1000, nms_iou: float = 0.5, max_detections: int = 100) -> list[Detection]:
        head = self.heads(features)
        dets = decode(head, self.anchors.per_level, self.config.image_size, score_thresh, topk_per_level, frame_index)
        return batched_nms(dets, nms_iou, max_detections)

