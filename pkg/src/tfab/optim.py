"""Adam and SGD parameter updates.

Functional style: updates return the new parameter array; the optimizer
state object is mutated in place (step count and moment estimates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class AdamState:
    """Moment estimates for one optimized tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, **kwargs) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **kwargs)


def adam_direction(grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Advance the moment estimates one step and return the bias-corrected
    update direction m_hat / (sqrt(v_hat) + eps)."""
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return m_hat / (np.sqrt(v_hat) + state.eps)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float, name: str = "param") -> np.ndarray:
    """One Adam step with bias correction; returns the updated parameter."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"adam_update({name}): param {param.shape}, grad {grad.shape}, "
            f"state {state.m.shape} must agree"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter {name!r}")
    return param - lr * adam_direction(grad, state)


def sgd_update(param: np.ndarray, grad: np.ndarray, lr: float,
               name: str = "param") -> np.ndarray:
    if param.shape != grad.shape:
        raise ShapeError(
            f"sgd_update({name}): param {param.shape} != grad {grad.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter {name!r}")
    return param - lr * grad
