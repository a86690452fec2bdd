"""Sliding-window inference over a sequence with per-frame feature reuse."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tfd.cache import CacheConfigError, FeatureCache
from tfd.detection import Detection, write_detections
from tfd.model import Detector, ModelConfig, param_shapes
from tfd.serialize import load_checkpoint, read_manifest
from tfd.synth import Sequence, window_indices
from tfd.tensor import Tensor


@dataclass
class InferenceStats:
    backbone_calls: int = 0
    fusions: int = 0
    frames: int = 0
    seconds: float = 0.0
    cache: dict = field(default_factory=dict)

    @property
    def seconds_per_frame(self) -> float:
        return self.seconds / max(self.frames, 1)


def load_detector(checkpoint_dir, dtype=np.float64) -> Detector:
    manifest = read_manifest(checkpoint_dir)
    if "model_config" not in manifest:
        raise ValueError(f"{checkpoint_dir}: manifest lacks model_config")
    config = ModelConfig.from_dict(manifest["model_config"])
    arrays = load_checkpoint(checkpoint_dir, param_shapes(config))
    params = {k: Tensor(v.astype(dtype), name=k) for k, v in arrays.items()}
    return Detector(config, params, np.dtype(dtype))


def infer_sequence(seq: Sequence, detector: Detector, cache: FeatureCache | None = None, use_cache: bool = True,
                   out_csv=None, score_thresh: float = 0.05, nms_iou: float = 0.5, max_detections: int = 100,
                   stats: InferenceStats | None = None) -> list[Detection]:
    """Detect objects in every frame of ``seq`` with symmetric, border-replicated windows.

    With the cache each frame goes through the backbone once; without it every
    window recomputes all of its ``2n+1`` frames. Both give identical detections.
    """
    n = detector.config.n
    if use_cache:
        cache = FeatureCache.for_radius(n) if cache is None else cache
        if cache.capacity < 2 * n + 1:
            raise CacheConfigError(f"cache capacity {cache.capacity} < window size {2 * n + 1}")
        cache.clear()
    stats = stats if stats is not None else InferenceStats()
    calls_before = detector.backbone_calls
    start = time.perf_counter()
    dets: list[Detection] = []
    for t in range(seq.length):
        idx = window_indices(seq.length, t, n)
        if use_cache:
            feats = [cache.get(i, lambda i=i: detector.extract(seq.frames[i], i)) for i in idx]
        else:
            feats = [detector.extract(seq.frames[i], i) for i in idx]
        dets.extend(detector.detect(feats, t, score_thresh, nms_iou=nms_iou, max_detections=max_detections))
        stats.fusions += 1
        stats.frames += 1
    stats.seconds += time.perf_counter() - start
    stats.backbone_calls += detector.backbone_calls - calls_before
    if use_cache:
        stats.cache = cache.stats()
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        write_detections(out_csv, dets)
    return dets
