"""Named parameters and SGD with momentum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    velocity: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.tensor.requires_grad = True
        self.tensor.name = self.name
        if self.velocity is None:
            self.velocity = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def sgd_momentum_step(params: Iterable[Parameter], lr: float, momentum: float) -> None:
    """``v <- momentum * v - lr * g``; ``w <- w + v``; then clear gradients.

    Parameters without a gradient are left untouched.
    """
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        p.velocity *= momentum
        p.velocity -= lr * g
        p.tensor.data += p.velocity
        p.tensor.grad = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None
