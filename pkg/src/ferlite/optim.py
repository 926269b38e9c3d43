"""Adam and AdamW with decoupled weight decay, as pure state transitions.

Both optimizers share the moment updates
    m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2
with bias correction.  AdamW subtracts lr * weight_decay * theta from the
pre-step parameters, outside the moment accumulators, so the (m, v)
trajectories of Adam and AdamW coincide exactly on identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """Parameter, gradient, and moment shapes must agree."""


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True)
class OptimState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, theta: np.ndarray) -> "OptimState":
        return cls(step=0, m=np.zeros_like(theta, dtype=np.float64),
                   v=np.zeros_like(theta, dtype=np.float64))


def _check_shapes(theta: np.ndarray, grad: np.ndarray, state: OptimState) -> None:
    shapes = {theta.shape, grad.shape, state.m.shape, state.v.shape}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"mismatched shapes: {sorted(map(str, shapes))}")


def adam_step(
    theta: np.ndarray, grad: np.ndarray, state: OptimState, cfg: OptimConfig
) -> tuple[np.ndarray, OptimState]:
    """One bias-corrected Adam update; cfg.weight_decay is ignored."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_shapes(theta, grad, state)

    step = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**step)
    v_hat = v / (1.0 - cfg.beta2**step)
    new_theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps_hat)
    return new_theta, OptimState(step=step, m=m, v=v)


def adamw_step(
    theta: np.ndarray, grad: np.ndarray, state: OptimState, cfg: OptimConfig
) -> tuple[np.ndarray, OptimState]:
    """Adam update plus decoupled decay: lr * wd * theta off the pre-step value."""
    theta = np.asarray(theta, dtype=np.float64)
    new_theta, new_state = adam_step(theta, grad, state, cfg)
    return new_theta - cfg.learning_rate * cfg.weight_decay * theta, new_state


STEP_FUNCTIONS = {"adam": adam_step, "adamw": adamw_step}
