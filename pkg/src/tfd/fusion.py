"""Per-channel temporal fusion of same-shape feature maps.

Given ``2n+1`` maps of shape ``(w, h, c)`` ordered in time, channel ``k`` of
the output is a learned linear combination of channel ``k`` across the
frames::

    out[..., k] = sum_j weights[k, j] * maps[j][..., k] + bias[k]

Channels never mix. :func:`fuse` computes this directly; :func:`fuse_via_gather`
builds the same result from channel re-ordering, a ``1x1x(2n+1)`` convolution
per channel and a final channel concatenation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tfd.ops import concat_channels, conv2d, gather_channel
from tfd.tensor import DimensionError, Tensor, apply_op, require_rank4


class FusionMode(str, enum.Enum):
    LEARNED = "learned_fusion"
    CONCAT = "concat_no_fusion"
    SINGLE = "single_frame"


def check_mode(mode: FusionMode | str, n: int) -> FusionMode:
    mode = FusionMode(mode)
    if mode is FusionMode.SINGLE and n != 0:
        raise ValueError(f"single_frame mode requires n = 0, got n = {n}")
    if n < 0:
        raise ValueError(f"temporal radius must be >= 0, got {n}")
    return mode


@dataclass
class FusionParams:
    """Fusion weights for one tap point: ``weights`` is ``(c, 2n+1)``, ``bias`` is ``(c,)``."""

    weights: Tensor
    bias: Tensor | None = None

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def window(self) -> int:
        return self.weights.shape[1]

    @property
    def radius(self) -> int:
        return (self.window - 1) // 2


def init_fusion(c: int, n: int, mode: str = "center", dtype=np.float64, bias: bool = True) -> FusionParams:
    """Initial fusion weights.

    ``center`` puts all weight on the middle frame so the module starts as an
    exact single-frame passthrough; ``uniform`` starts as a temporal mean.
    """
    t = 2 * n + 1
    if mode == "center":
        w = np.zeros((c, t), dtype=dtype)
        w[:, n] = 1.0
    elif mode == "uniform":
        w = np.full((c, t), 1.0 / t, dtype=dtype)
    else:
        raise ValueError(f"unknown fusion init {mode!r}; expected 'center' or 'uniform'")
    b = Tensor(np.zeros(c, dtype=dtype)) if bias else None
    return FusionParams(Tensor(w), b)


def _check_maps(maps: Sequence[Tensor], params: FusionParams) -> None:
    if len(maps) != params.window:
        raise DimensionError(f"fusion expects {params.window} maps (2n+1), got {len(maps)}", "time")
    ref = maps[0].shape
    for m in maps:
        require_rank4(m, "feature map")
        if m.shape != ref:
            raise DimensionError(f"all frames must share one shape, got {m.shape} vs {ref}", "frame shape")
    if ref[3] != params.channels:
        raise DimensionError(f"fusion weights cover {params.channels} channels, maps have {ref[3]}", "channels")
    if params.bias is not None and params.bias.shape != (params.channels,):
        raise DimensionError(f"fusion bias shape {params.bias.shape} != ({params.channels},)", "bias")


def fuse(maps: Sequence[Tensor], params: FusionParams) -> Tensor:
    maps = tuple(maps)
    _check_maps(maps, params)
    w = params.weights.data
    out = maps[0].data * w[:, 0]
    for j in range(1, len(maps)):
        out = out + maps[j].data * w[:, j]
    if params.bias is not None:
        out = out + params.bias.data

    def backward(g):
        grads = [g * w[:, j] if m.requires_grad else None for j, m in enumerate(maps)]
        gw = None
        if params.weights.requires_grad:
            gw = np.stack([(g * m.data).sum(axis=(0, 1, 2)) for m in maps], axis=1)
        grads.append(gw)
        if params.bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)) if params.bias.requires_grad else None)
        return tuple(grads)

    inputs = maps + (params.weights,) + ((params.bias,) if params.bias is not None else ())
    return apply_op(out, inputs, backward)


def _kernel_for_channel(weights: Tensor, k: int) -> Tensor:
    t = weights.shape[1]

    def backward(g):
        gw = np.zeros(weights.shape, dtype=g.dtype)
        gw[k] = g.reshape(t)
        return (gw,)

    return apply_op(weights.data[k].reshape(1, 1, t, 1), (weights,), backward)


def _bias_for_channel(bias: Tensor, k: int) -> Tensor:
    def backward(g):
        gb = np.zeros(bias.shape, dtype=g.dtype)
        gb[k] = g[0]
        return (gb,)

    return apply_op(bias.data[k:k + 1], (bias,), backward)


def fuse_via_gather(maps: Sequence[Tensor], params: FusionParams) -> Tensor:
    """The fusion computed literally: gather channel k over time, 1x1 conv, concatenate."""
    maps = tuple(maps)
    _check_maps(maps, params)
    outputs = []
    for k in range(params.channels):
        stacked = gather_channel(maps, k)  # (n, h, w, 2n+1)
        kernel = _kernel_for_channel(params.weights, k)
        bias = _bias_for_channel(params.bias, k) if params.bias is not None else None
        outputs.append(conv2d(stacked, kernel, bias, stride=1, padding="valid"))
    return concat_channels(outputs)


def concat_variant(maps: Sequence[Tensor]) -> Tensor:
    """No-fusion ablation: plain channel concatenation in temporal order."""
    maps = tuple(maps)
    ref = maps[0].shape
    for m in maps:
        require_rank4(m, "feature map")
        if m.shape != ref:
            raise DimensionError(f"all frames must share one shape, got {m.shape} vs {ref}", "frame shape")
    return concat_channels(maps)
