"""Central-difference gradient checking against the tape."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mapre.tensor import Tape, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    failures: list = field(default_factory=list)  # (param index, flat index, analytic, numeric)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_difference_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``f(*params)`` with central differences.

    ``f`` must be deterministic and return a scalar tensor.  Every
    coordinate of every parameter is perturbed.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    with Tape() as tape:
        out = f(*params)
    if out.requires_grad and out in tape:
        backward(tape, out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = float(f(*params).data)
                flat[k] = orig - h
                fm = float(f(*params).data)
                flat[k] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(analytic[pi].reshape(-1)[k])
                err = float(relative_error(ana, num))
                report.checked += 1
                report.max_rel_error = max(report.max_rel_error, err)
                if err >= tolerance:
                    report.failures.append((pi, k, ana, num))
    for p in params:
        p.grad = None
    return report
