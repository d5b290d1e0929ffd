"""Finite-difference verification of analytic gradients.

Central differences are the ground truth for the value of the
derivative; the two one-sided differences additionally expose kinks
(points where the left and right slopes disagree), which central
differencing alone can silently average away.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .optim import Param, zero_grads
from .tensor import Tensor


@dataclass
class CoordinateFailure:
    param: str
    index: tuple[int, int]
    analytic: float
    numeric: float
    rel_error: float
    non_smooth: bool = False


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    rel_tol: float
    failures: list[CoordinateFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else f"FAIL ({len(self.failures)} coordinates)"
        return (
            f"grad check: {status}, max relative error {self.max_rel_error:.3e} "
            f"over {self.checked} coordinates (tol {self.rel_tol:.1e})"
        )


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    rel_tol: float = 1e-4,
    step: float = 1e-5,
    nonsmooth_tol: float = 0.25,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be a deterministic scalar function of the given
    parameters (it is re-evaluated with coordinates perturbed in place).
    A coordinate fails when the analytic/central relative error exceeds
    ``rel_tol``, or when the forward and backward one-sided differences
    disagree by more than ``nonsmooth_tol`` (a kink).
    """
    zero_grads(params)
    base = loss_fn()
    base.backward()
    analytic = {p.name: (p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.tensor.data)) for p in params}
    f0 = base.item()

    failures: list[CoordinateFailure] = []
    max_rel = 0.0
    checked = 0
    for p in params:
        data = p.tensor.data
        grad = analytic[p.name]
        for index in np.ndindex(*data.shape):
            original = data[index]
            data[index] = original + step
            f_plus = loss_fn().item()
            data[index] = original - step
            f_minus = loss_fn().item()
            data[index] = original

            central = (f_plus - f_minus) / (2.0 * step)
            fwd = (f_plus - f0) / step
            bwd = (f0 - f_minus) / step
            a = float(grad[index])
            rel = abs(a - central) / max(1.0, abs(a), abs(central))
            asym = abs(fwd - bwd) / max(1.0, abs(fwd), abs(bwd))
            max_rel = max(max_rel, rel)
            checked += 1
            if asym > nonsmooth_tol:
                failures.append(
                    CoordinateFailure(p.name, index, a, central, rel, non_smooth=True)
                )
            elif rel > rel_tol:
                failures.append(CoordinateFailure(p.name, index, a, central, rel))
    return GradCheckReport(max_rel_error=max_rel, checked=checked, rel_tol=rel_tol, failures=failures)
