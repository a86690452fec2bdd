"""Dense tensor value type and the gradient tape.

Feature maps are rank-4 ``(batch, height, width, channels)`` arrays. Loss
reductions produce rank-0 tensors and a few bookkeeping ops (row flattening
for anchors) produce rank-2 ones; everything else in the network is rank 4.

Operations record themselves on the innermost active :class:`GradTape`.
Calling :meth:`GradTape.backward` walks the records in exact reverse order
of execution and accumulates gradients additively into ``Tensor.grad`` of
every leaf that requires them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DimensionError(ValueError):
    """Raised when tensor shapes disagree along a named axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message if axis is None else f"{message} (axis: {axis})")
        self.axis = axis


class Tensor:
    """Dense array plus autodiff bookkeeping.

    Tensors are treated as immutable once created by an op; parameters are the
    exception and get their ``data`` replaced by the optimizer between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        from tfd.ops import add

        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from tfd.ops import mul

        return mul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


_ACTIVE_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered log of differentiable op applications.

    Usage::

        with GradTape() as tape:
            loss = model(x)
        tape.backward(loss)

    A tape is single-owner; do not share one between threads.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "GradTape contexts must nest"

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default ones) from ``output`` to all recorded leaves."""
        if grad is None:
            grad = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.dtype)}
        owners: dict[int, Tensor] = {id(output): output}
        produced: set[int] = set()

        for rec in reversed(self.records):
            key = id(rec.output)
            produced.add(key)
            g = grads.pop(key, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for tensor, g_in in zip(rec.inputs, in_grads):
                if g_in is None or not tensor.requires_grad:
                    continue
                tk = id(tensor)
                if tk in grads:
                    grads[tk] = grads[tk] + g_in
                else:
                    grads[tk] = g_in
                    owners[tk] = tensor

        for key, g in grads.items():
            if key in produced:
                continue
            tensor = owners[key]
            if not tensor.requires_grad:
                continue
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape if needed.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per input, in input order.
    """
    inputs = tuple(inputs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        tape.records.append(_Record(out, inputs, backward))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def require_rank4(t: Tensor, what: str = "input") -> None:
    if t.data.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (batch, height, width, channels), got shape {t.shape}", "rank")
