"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, zero_grads

STEP = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    h: float = STEP) -> float:
    """Worst relative error between backprop and central differences over ``tensors``."""
    zero_grads(tensors)
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_grad(lambda: loss_fn().item(), t.data, h)
        worst = max(worst, relative_error(a, n))
    zero_grads(tensors)
    return worst
