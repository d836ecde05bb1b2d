"""Central finite-difference checks against tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import GradientError, NonFiniteError, Tensor, current_tape, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    @property
    def flagged(self) -> list[int]:
        return [i for i, e in enumerate(self.max_rel_error) if not e < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def _scalar(f: Callable[[], Tensor]) -> float:
    v = f()
    val = float(np.asarray(v.data).reshape(-1)[0])
    if v.size != 1:
        raise GradientError(f"objective must be scalar, got shape {v.shape}")
    if not np.isfinite(val):
        raise NonFiniteError("objective is not finite")
    return val


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            step: float = 1e-5, tolerance: float = 1e-4,
                            floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``f()`` to central differences, per parameter.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    ``floor`` keeps near-zero gradients from amplifying rounding noise.
    """
    tape = current_tape()
    tape.clear()
    loss = f()
    if loss.size != 1 or not np.isfinite(loss.data).all():
        raise NonFiniteError("objective must be a finite scalar")
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    tape.clear()

    report = GradCheckReport(tolerance=tolerance)
    with no_grad():
        for i, (p, a) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            worst = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = _scalar(f)
                flat[j] = orig - step
                down = _scalar(f)
                flat[j] = orig
                num = (up - down) / (2 * step)
                ana = a.reshape(-1)[j]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
            report.max_rel_error.append(worst)
            report.names.append(p.name or f"param{i}")
    return report
