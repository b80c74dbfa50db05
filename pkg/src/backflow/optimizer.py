"""SGD with momentum, per-step weight decay, and global-norm gradient clipping.

The momentum buffer is the memory the harness probes: ``causal_break``
zeroes it while leaving parameters untouched, severing the only channel by
which the first instrument's history can reach the second one through the
optimizer.

Update rule (buffer-form heavy ball):

    g = clip(grad + weight_decay * params)
    velocity' = momentum * velocity + g
    params'   = params - lr * velocity'

Weight decay enters before clipping and before the buffer, which keeps the
buffer bounded when clipping is active.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NanGuardError


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass
class OptimizerState:
    velocity: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n))


def step(
    params: np.ndarray,
    state: OptimizerState,
    grad: np.ndarray,
    config: OptimizerConfig,
) -> tuple[np.ndarray, OptimizerState]:
    """One update; returns fresh arrays, inputs are never mutated."""
    if params.shape != grad.shape or state.velocity.shape != params.shape:
        raise ValueError("params, gradient, and velocity must share one shape")
    if not np.all(np.isfinite(grad)):
        raise NanGuardError("non-finite gradient", {"where": "grad"})

    g = grad + config.weight_decay * params
    if config.clip_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > config.clip_norm:
            g = g * (config.clip_norm / norm)
    velocity = config.momentum * state.velocity + g
    with np.errstate(over="ignore", invalid="ignore"):  # NaN guard below decides
        new_params = params - config.lr * velocity
    if not np.all(np.isfinite(new_params)):
        raise NanGuardError("non-finite parameter update", {"where": "update", "lr": config.lr})
    return new_params, OptimizerState(velocity)


def causal_break(state: OptimizerState) -> OptimizerState:
    """Zero the momentum buffer; parameters are not part of the state."""
    return OptimizerState(np.zeros_like(state.velocity))


def amplification_factor(mu: float, k: int) -> float:
    """Geometric accumulation (1 - mu^k) / (1 - mu); 1.0 when mu == 0."""
    if not 0.0 <= mu < 1.0:
        raise ValueError("mu must lie in [0, 1)")
    if k < 1:
        raise ValueError("k must be a positive integer")
    if mu == 0.0:
        return 1.0
    return (1.0 - mu**k) / (1.0 - mu)
