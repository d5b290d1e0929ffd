"""Trainable parameters and the Adam update."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..errors import NonFiniteGradientError
from .tensor import Tensor


@dataclass
class Param:
    """A named trainable tensor with its Adam moment buffers."""

    tensor: Tensor
    name: str
    adam_m: np.ndarray = field(repr=False, default=None)
    adam_v: np.ndarray = field(repr=False, default=None)
    step_count: int = 0

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.tensor.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.tensor.data)

    @classmethod
    def create(cls, name: str, data) -> "Param":
        return cls(tensor=Tensor(data, requires_grad=True), name=name)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.tensor.zero_grad()


def adam_step(
    params: Iterable[Param],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction, applied in place.

    Parameters whose gradient slot is empty are skipped (they did not
    participate in the last backward pass). A NaN/Inf gradient aborts
    the whole step, naming the offending parameter.
    """
    if lr <= 0.0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"adam_step: betas must lie in [0, 1), got {beta1}, {beta2}")
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter '{p.name}'")
        p.step_count += 1
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**p.step_count)
        v_hat = p.adam_v / (1.0 - beta2**p.step_count)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
