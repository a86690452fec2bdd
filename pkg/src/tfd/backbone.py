"""VGG-style feature extractor with block-3/4/5 tap points."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from tfd.ops import conv2d, maxpool2, relu
from tfd.tensor import DimensionError, Tensor, require_rank4

TAPS = (3, 4, 5)


@dataclass(frozen=True)
class BackboneConfig:
    block_channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3, 3)
    frozen_blocks: int = 0
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "convs_per_block", tuple(int(c) for c in self.convs_per_block))
        if len(self.block_channels) != 5 or len(self.convs_per_block) != 5:
            raise ValueError("backbone needs exactly 5 blocks")
        if any(c < 1 for c in self.block_channels) or any(c < 1 for c in self.convs_per_block):
            raise ValueError("block widths and conv counts must be positive")
        if any(b < a for a, b in zip(self.block_channels[:4], self.block_channels[1:4])):
            raise ValueError(f"block_channels must be nondecreasing through blocks 1-4: {self.block_channels}")
        if not 0 <= self.frozen_blocks <= 5:
            raise ValueError(f"frozen_blocks must be in [0, 5], got {self.frozen_blocks}")

    def tap_channels(self) -> dict[int, int]:
        return {b: self.block_channels[b - 1] for b in TAPS}


@dataclass
class BackboneFeatures:
    b3: Tensor
    b4: Tensor
    b5: Tensor
    frame_index: int = -1

    def tap(self, block: int) -> Tensor:
        return {3: self.b3, 4: self.b4, 5: self.b5}[block]


def param_seed(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator, so adding or removing a parameter elsewhere never shifts this one's draw."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def he_kernel(seed: int, name: str, shape: tuple[int, int, int, int], dtype=np.float64) -> np.ndarray:
    kh, kw, cin, _ = shape
    std = np.sqrt(2.0 / (kh * kw * cin))
    return (param_seed(seed, name).standard_normal(shape) * std).astype(dtype)


def conv_names(config: BackboneConfig):
    """Yield ``(block, conv, prefix)`` for every conv layer in order."""
    for b, count in enumerate(config.convs_per_block, start=1):
        for j in range(1, count + 1):
            yield b, j, f"backbone.block{b}.conv{j}"


def init_params(config: BackboneConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    cin = config.in_channels
    for b, j, prefix in conv_names(config):
        cout = config.block_channels[b - 1]
        params[f"{prefix}.kernel"] = Tensor(he_kernel(seed, f"{prefix}.kernel", (3, 3, cin, cout), dtype), name=f"{prefix}.kernel")
        params[f"{prefix}.bias"] = Tensor(np.zeros(cout, dtype=dtype), name=f"{prefix}.bias")
        cin = cout
    return params


def block_of(name: str) -> int | None:
    if not name.startswith("backbone.block"):
        return None
    return int(name[len("backbone.block")])


def freeze_mask(config: BackboneConfig, names) -> dict[str, bool]:
    """Map each parameter name to True if the optimizer may update it.

    Backbone blocks ``1..frozen_blocks`` are masked out; everything outside
    the backbone (fusion, pyramid, heads) stays trainable.
    """
    mask = {}
    for name in names:
        block = block_of(name)
        mask[name] = block is None or block > config.frozen_blocks
    return mask


def check_input_size(height: int, width: int) -> None:
    for size, axis in ((height, "height"), (width, "width")):
        if size % 32:
            raise DimensionError(f"backbone input {axis} {size} is not divisible by 32", axis)


def run_blocks(x: Tensor, config: BackboneConfig, params: Mapping[str, Tensor], first: int = 1, last: int = 5) -> dict[int, Tensor]:
    """Run blocks ``first..last`` starting from ``x`` and return each block's pooled output."""
    outputs = {}
    for b in range(first, last + 1):
        for j in range(1, config.convs_per_block[b - 1] + 1):
            prefix = f"backbone.block{b}.conv{j}"
            x = relu(conv2d(x, params[f"{prefix}.kernel"], params[f"{prefix}.bias"]))
        x = maxpool2(x)
        outputs[b] = x
    return outputs


def extract(frame: Tensor, config: BackboneConfig, params: Mapping[str, Tensor], frame_index: int = -1) -> BackboneFeatures:
    """Run all five blocks on one frame and keep the block 3/4/5 outputs."""
    require_rank4(frame, "frame")
    check_input_size(frame.shape[1], frame.shape[2])
    if frame.shape[3] != config.in_channels:
        raise DimensionError(f"frame has {frame.shape[3]} channels, backbone expects {config.in_channels}", "channels")
    out = run_blocks(frame, config, params)
    return BackboneFeatures(out[3], out[4], out[5], frame_index)


@dataclass
class FrozenPrefixCache:
    """Memo of the frozen part of the backbone, keyed by frame identity.

    Blocks ``1..frozen_blocks`` never change during training, so their outputs
    (and any tap points among them) are computed once per frame.
    """

    frozen_blocks: int
    entries: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def extract(self, key, frame: Tensor, config: BackboneConfig, params: Mapping[str, Tensor], frame_index: int = -1) -> BackboneFeatures:
        f = self.frozen_blocks
        if f == 0:
            return extract(frame, config, params, frame_index)
        prefix = self.entries.get(key)
        if prefix is None:
            self.misses += 1
            prefix = run_blocks(frame, config, params, 1, f)
            prefix = {b: Tensor(t.data) for b, t in prefix.items() if b == f or b in TAPS}
            self.entries[key] = prefix
        else:
            self.hits += 1
        outputs = dict(prefix)
        if f < 5:
            outputs.update(run_blocks(prefix[f], config, params, f + 1, 5))
        return BackboneFeatures(outputs[3], outputs[4], outputs[5], frame_index)
