"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import GradientTape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_gradient(fn, arrays, index, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn(*base))
        flat[i] = old - h
        fm = float(fn(*base))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def finite_difference_check(function, point, tolerance=1e-5, h=1e-5) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``function`` maps Tensors to a scalar Tensor; ``point`` is a list of arrays.
    The error for each input is ``max|analytic - numeric| / max|numeric|``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        out = function(*leaves)
    tape.backward(out)

    def value(*xs):
        return function(*(Tensor(x) for x in xs)).data

    errors = []
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_gradient(value, arrays, i, h)
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
        errors.append(float(np.max(np.abs(analytic - numeric)) / scale))
    return GradCheckReport(max(errors), errors, tolerance)
