from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-2


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamWState":
        return AdamWState(self.m.copy(), self.v.copy(), self.t)


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamWState,
    lr: float,
    wd: float = WEIGHT_DECAY,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = ADAM_EPS,
) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-weight-decay Adam update. Inputs are not mutated."""
    if params.shape != grads.shape or params.shape != state.m.shape or params.shape != state.v.shape:
        raise ShapeError(
            f"adamw_step: shape mismatch params {params.shape} vs grads {grads.shape} "
            f"vs state {state.m.shape}/{state.v.shape}"
        )
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params * (1.0 - lr * wd)
    new = new - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamWState(m, v, t)


def clip_global_norm(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, bool]:
    """Rescale ``grads`` so its L2 norm is at most ``max_norm``; report whether it fired."""
    norm = float(np.sqrt(np.dot(grads, grads)))
    if max_norm > 0 and norm > max_norm:
        return grads * (max_norm / norm), True
    return grads, False
