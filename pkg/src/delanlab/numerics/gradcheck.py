"""Central finite-difference validation for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

REL_FLOOR = 1e-8


@dataclass(frozen=True)
class GradientReport:
    max_relative_error: float
    worst_coordinate: tuple[int, ...]
    passed: bool


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               tol: float = 1e-4) -> GradientReport:
    """Compare reverse-mode gradients of scalar `f` against central differences.

    Relative error at each coordinate uses max(|grad|, |fd|, 1e-8) as the
    denominator. Raises if `f` is non-finite at any probe point.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.asarray(x, dtype=np.float64)

    def evaluate(values: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(values))
        val = float(out.data)
        if not np.isfinite(val):
            raise ValueError("non-finite function value at probe point")
        return val

    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise ValueError("non-finite function value at probe point")
    out.backward()
    grad = np.zeros_like(x0) if leaf.grad is None else np.asarray(leaf.grad, dtype=np.float64)

    fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = evaluate((flat + bump).reshape(x0.shape))
        lo = evaluate((flat - bump).reshape(x0.shape))
        fd.reshape(-1)[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), REL_FLOOR)
    rel = np.abs(grad - fd) / denom
    worst_flat = int(np.argmax(rel))
    worst = tuple(int(c) for c in np.unravel_index(worst_flat, x0.shape)) if x0.ndim else ()
    max_rel = float(rel.reshape(-1)[worst_flat])
    return GradientReport(max_relative_error=max_rel, worst_coordinate=worst,
                          passed=max_rel <= tol)
