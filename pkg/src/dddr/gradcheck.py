"""Central finite-difference verification of analytic gradients.

The check re-evaluates the graph function on float64 copies of the
parameters so that the difference quotient is limited by truncation error
rather than float32 rounding; the analytic gradients being verified are
computed by the same graph in float64, which exercises identical kernel
code paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet
from .tensor import evaluate_with_gradients


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float]
    passed: bool

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def max_relative_error(a: ParamSet, b: ParamSet, floor: float = 1e-8) -> dict[str, float]:
    """Per-parameter max of |a-b| / max(|a|, |b|, floor)."""
    out = {}
    for name in a:
        x = a[name].astype(np.float64)
        y = b[name].astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        out[name] = float(np.max(np.abs(x - y) / denom)) if x.size else 0.0
    return out


def numeric_gradients(f, params: ParamSet, *inputs, h: float = 1e-3) -> ParamSet:
    """Central differences of f over every parameter component."""
    base = params.astype(np.float64)
    grads = {}
    for name in params:
        flat = base[name].reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = _value_only(f, base, *inputs)
            flat[i] = orig - h
            down, _ = _value_only(f, base, *inputs)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads[name] = g.reshape(params[name].shape)
    return ParamSet(grads)


def _value_only(f, params64: dict, *inputs):
    value, grads = evaluate_with_gradients(f, params64, *inputs, dtype=np.float64)
    return value, grads


def finite_difference_check(
    f, params: ParamSet, *inputs, h: float = 1e-3, tolerance: float = 1e-3, floor: float = 1e-2
) -> GradCheckReport:
    """Compare analytic gradients of f against central differences.

    The error for a component is |a - b| / max(|a|, |b|, floor): relative
    at `tolerance` for components above `floor`, absolute at
    `tolerance * floor` below it (the usual gradcheck convention; the
    difference quotient's truncation error is absolute, so a pure ratio
    would flag near-zero components whose gradients are in fact correct).
    """
    _, analytic = evaluate_with_gradients(f, params.astype(np.float64), *inputs, dtype=np.float64)
    numeric = numeric_gradients(f, params, *inputs, h=h)
    errors = max_relative_error(analytic, numeric, floor=floor)
    return GradCheckReport(
        tolerance=tolerance,
        max_rel_error=errors,
        passed=all(e <= tolerance for e in errors.values()),
    )
