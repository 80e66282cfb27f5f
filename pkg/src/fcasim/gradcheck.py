"""Central finite-difference gradient checking.

Only forward values are used here, so the check stays independent of the
backward rules it verifies.
"""
from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from fcasim import autodiff as ad
from fcasim.autodiff import Tensor

# denominators below this are treated as this (gradients that are ~0 on both sides)
REL_FLOOR = 1e-6


def numerical_grad(f: Callable[[Mapping[str, np.ndarray]], float], arrays: Mapping[str, np.ndarray],
                   eps: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr, dtype=np.float64)
        for i in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][i] += eps
            minus[name][i] -= eps
            g[i] = (f(plus) - f(minus)) / (2 * eps)
        out[name] = g
    return out


def analytic_grad(build: Callable[[Mapping[str, Tensor]], Tensor],
                  arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    ad.backward(build(leaves))
    # leaves the loss never touches have zero gradient
    return {k: np.zeros_like(t.values) if t.grad is None else t.grad for k, t in leaves.items()}


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    worst = 0.0
    for k in a:
        denom = np.maximum(np.maximum(np.abs(a[k]), np.abs(b[k])), REL_FLOOR)
        worst = max(worst, float(np.max(np.abs(a[k] - b[k]) / denom)))
    return worst


def check(build: Callable[[Mapping[str, Tensor]], Tensor], arrays: Mapping[str, np.ndarray],
          eps: float = 1e-5, frozen_build: Optional[Callable] = None) -> float:
    """Max relative error between backward and finite differences of ``build``.

    Losses with a stop-gradient are differentiated as if the detached value
    were a constant. For those pass ``frozen_build(vars, base)``, which must
    compute the same loss with every stop-gradient input taken from ``base``
    (constant tensors at the unperturbed point) instead of ``vars``.
    """
    analytic = analytic_grad(build, arrays)
    base = {k: Tensor(v.copy()) for k, v in arrays.items()}

    def f(vals):
        t = {k: Tensor(v) for k, v in vals.items()}
        return (build(t) if frozen_build is None else frozen_build(t, base)).item()

    return max_relative_error(analytic, numerical_grad(f, arrays, eps))
