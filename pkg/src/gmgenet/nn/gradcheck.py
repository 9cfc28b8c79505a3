"""Central finite-difference check of autodiff gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x, dtype=np.float64)).item()
        flat[i] = orig - step
        fm = f(Tensor(x, dtype=np.float64)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |central difference|).

    ``f`` must map a float64 tensor to a scalar tensor.
    """
    x = Tensor(np.asarray(point, dtype=np.float64), requires_grad=True, dtype=np.float64)
    out = f(x)
    backward(out)
    auto = x.grad if x.grad is not None else np.zeros_like(x.data)
    num = numerical_grad(f, x.data, step)
    return float(np.max(np.abs(auto - num) / np.maximum(1.0, np.abs(num))))
