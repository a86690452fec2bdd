"""Differentiable kernels over NHWC tensors.

Every op is a pure function of its inputs. Gradients are only computed for
inputs flagged ``requires_grad``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tfd.tensor import DimensionError, Tensor, apply_op, require_rank4


def conv_output_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out_size, pad_before, pad_after)`` for one spatial axis.

    ``same`` follows the TensorFlow convention: ``out = ceil(size / stride)``
    with any odd leftover padding placed after.
    """
    if padding == "valid":
        if size < k:
            raise DimensionError(f"valid conv needs size >= kernel ({size} < {k})", "spatial")
        return (size - k) // stride + 1, 0, 0
    if padding != "same":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation. ``kernel`` is ``(kh, kw, cin, cout)``; ``bias`` is ``(cout,)``."""
    require_rank4(x)
    if kernel.data.ndim != 4:
        raise DimensionError(f"kernel must be (kh, kw, cin, cout), got {kernel.shape}", "kernel rank")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if cin != c:
        raise DimensionError(f"kernel expects {cin} input channels, input has {c}", "channels")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match cout={cout}", "bias")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    ho, pt, pb = conv_output_geometry(h, kh, stride, padding)
    wo, pl, pr = conv_output_geometry(w, kw, stride, padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    # (n, ho, wo, c, kh, kw) strided view into the padded input
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    kd = kernel.data
    out = np.tensordot(win, kd, axes=([3, 4, 5], [2, 0, 1]))
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            # col2im: one matmul, then kh*kw strided scatter-adds
            gwin = np.tensordot(g, kd, axes=([3], [3]))  # (n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            he = stride * (ho - 1) + 1
            we = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + he:stride, j:j + we:stride, :] += gwin[:, :, :, i, j, :]
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        if kernel.requires_grad:
            gk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return apply_op(out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return apply_op(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties go to the first cell in row-major scan order."""
    require_rank4(x)
    n, h, w, c = x.shape
    if h % 2:
        raise DimensionError(f"maxpool2 needs even height, got {h}", "height")
    if w % 2:
        raise DimensionError(f"maxpool2 needs even width, got {w}", "width")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c),)

    return apply_op(out, (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    require_rank4(x)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return apply_op(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs identical shapes, got {a.shape} and {b.shape}", "shape")
    return apply_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul needs identical shapes, got {a.shape} and {b.shape}", "shape")
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None))


def _check_spatial(inputs: Sequence[Tensor], what: str) -> None:
    if not inputs:
        raise ValueError(f"{what} needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        require_rank4(t)
        for axis, name in ((0, "batch"), (1, "height"), (2, "width")):
            if t.shape[axis] != ref[axis]:
                raise DimensionError(f"{what}: {name} mismatch {t.shape} vs {ref}", name)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    _check_spatial(inputs, "concat_channels")
    inputs = tuple(inputs)
    bounds = np.cumsum([0] + [t.shape[3] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=3)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return apply_op(out, inputs, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    require_rank4(x)
    c = x.shape[3]
    if not 0 <= start < stop <= c:
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {c} channels", "channels")

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., start:stop] = g
        return (gx,)

    return apply_op(x.data[..., start:stop], (x,), backward)


def gather_channel(inputs: Sequence[Tensor], k: int) -> Tensor:
    """Stack channel ``k`` of every input along the channel axis, in input order.

    With the inputs being the ``2n+1`` frames of a window, output channel ``j``
    is channel ``k`` of frame ``j``.
    """
    _check_spatial(inputs, "gather_channel")
    inputs = tuple(inputs)
    c = inputs[0].shape[3]
    for t in inputs:
        if t.shape != inputs[0].shape:
            raise DimensionError(f"gather_channel: shape mismatch {t.shape} vs {inputs[0].shape}", "channels")
    if not 0 <= k < c:
        raise DimensionError(f"channel index {k} out of range for {c} channels", "channels")
    out = np.stack([t.data[..., k] for t in inputs], axis=-1)

    def backward(g):
        grads = []
        for j, t in enumerate(inputs):
            if not t.requires_grad:
                grads.append(None)
                continue
            gt = np.zeros(t.shape, dtype=g.dtype)
            gt[..., k] = g[..., j]
            grads.append(gt)
        return tuple(grads)

    return apply_op(out, inputs, backward)


def flatten_rows(inputs: Sequence[Tensor], width: int) -> Tensor:
    """Reshape each input to ``(-1, width)`` and stack the rows into one rank-2 tensor.

    Used to line per-level head outputs ``(1, h, w, A*width)`` up with the
    flat anchor list, whose order is (level, y, x, anchor).
    """
    inputs = tuple(inputs)
    for t in inputs:
        if t.data.size % width:
            raise DimensionError(f"size {t.data.size} not divisible by row width {width}", "channels")
    parts = [t.data.reshape(-1, width) for t in inputs]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate(parts, axis=0)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]].reshape(t.shape) for i, t in enumerate(inputs))

    return apply_op(out, inputs, backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements (rank-0 result)."""
    return apply_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_op(x.data * factor, (x,), lambda g: (g * factor,))
