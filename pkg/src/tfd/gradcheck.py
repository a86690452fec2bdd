"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from tfd.tensor import GradTape, Tensor


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.copy())).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with GradTape() as tape:
        y = f(xt)
    if y.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    tape.backward(y)
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` maps a Tensor to a scalar Tensor. Pick ``x`` away from relu kinks and
    pooling ties; the check is only meaningful where ``f`` is smooth.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    analytic = analytic_gradient(f, x)
    numeric = numerical_gradient(f, x, eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
