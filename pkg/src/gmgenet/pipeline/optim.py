"""Adadelta (Zeiler, 2012) over lists of parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn.tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0  # 1.0 reproduces the original parameter-free rule
    sq_grad: list[np.ndarray] = field(default_factory=list)  # E[g^2]
    sq_delta: list[np.ndarray] = field(default_factory=list)  # E[dx^2]

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @classmethod
    def for_params(cls, params, **kw) -> "AdadeltaState":
        st = cls(**kw)
        st.sq_grad = [np.zeros_like(_data(p), dtype=np.float64) for p in params]
        st.sq_delta = [np.zeros_like(_data(p), dtype=np.float64) for p in params]
        return st


def _data(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def adadelta_step(params, grads, state: AdadeltaState) -> list[np.ndarray]:
    """Update ``params`` in place and return the applied steps.

    E[g2] <- rho E[g2] + (1 - rho) g^2
    dx    <- -sqrt(E[dx2] + eps) / sqrt(E[g2] + eps) * g
    E[dx2] <- rho E[dx2] + (1 - rho) dx^2
    """
    if not state.sq_grad:
        state.sq_grad = [np.zeros(np.shape(_data(p)), dtype=np.float64) for p in params]
        state.sq_delta = [np.zeros(np.shape(_data(p)), dtype=np.float64) for p in params]
    if len(params) != len(grads) or len(params) != len(state.sq_grad):
        raise ValueError("params, grads and optimizer state disagree in length")
    rho, eps = state.rho, state.eps
    steps = []
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = _data(p)
        g = np.zeros(arr.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != arr.shape or state.sq_grad[i].shape != arr.shape:
            raise ValueError(f"parameter {i}: shape {arr.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"parameter {i}: non-finite gradient (max |g| = {np.nanmax(np.abs(g))})")
        eg = state.sq_grad[i]
        ed = state.sq_delta[i]
        eg *= rho
        eg += (1 - rho) * g * g
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * dx * dx
        arr += (state.lr * dx).astype(arr.dtype)
        steps.append(dx)
    return steps
