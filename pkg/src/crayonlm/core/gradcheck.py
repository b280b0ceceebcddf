"""Central finite-difference gradients, used as an independent oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

FD_STEP = 1e-3


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Perturb each entry of ``param`` by +-h and difference the scalar output of ``f``."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(f().data)
            flat[i] = old - h
            down = float(f().data)
            flat[i] = old
            g[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
        p.requires_grad = True
    backward(f())
    return [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = FD_STEP,
              rtol: float = 1e-3, atol: float = 1e-6) -> tuple[bool, float]:
    """Compare backprop gradients of scalar ``f`` against central differences.

    Returns (ok, worst violation ratio), where the ratio is
    ``max |a - n| / (atol + rtol * |n|)`` over all entries; ok means <= 1.
    """
    analytic = analytic_grads(f, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_grad(f, p, h)
        ratio = np.max(np.abs(a - n) / (atol + rtol * np.abs(n))) if a.size else 0.0
        worst = max(worst, float(ratio))
    return worst <= 1.0, worst
