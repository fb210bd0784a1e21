"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad, no_grad


def numerical_grad(f: Callable[[], Tensor], param: Tensor, eps: float) -> np.ndarray:
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
    return out


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over all coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` takes no arguments and must read ``params`` by reference; the
    check perturbs ``param.data`` in place and restores it.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    analytic = grad(f(), params)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_grad(f, p, eps)
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
