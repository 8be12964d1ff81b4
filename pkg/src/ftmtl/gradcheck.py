"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
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


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(t)
    backward(out)
    return np.zeros_like(t.data) if t.grad is None else t.grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over components of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` must map a float64 tensor shaped like ``x`` to a scalar tensor.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, eps)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))) if x.size else 0.0
