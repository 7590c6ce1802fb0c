"""Optimizers: Adam with decoupled weight decay, polynomial LR decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params: dict, beta1: float, beta2: float, eps: float,
                 weight_decay: float, lr: float):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step_count = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr = lr
        self.nan_guard_count = 0


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None) -> bool:
    """One decoupled-weight-decay Adam step, in place.

    Returns True if applied; a non-finite gradient anywhere skips the whole
    step and increments the NaN-guard counter instead.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"adamw_step: gradient for unknown parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != parameter shape "
                             f"{params[name].data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            state.nan_guard_count += 1
            return False
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)
    return True


class AdamW:
    """Object wrapper over adamw_step for a fixed parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        for name, t in params.items():
            if not isinstance(t, Tensor):
                raise TypeError(f"AdamW: parameter {name!r} is not a Tensor")
        self.params = params
        self.state = OptimizerState(params, betas[0], betas[1], eps, weight_decay, lr)

    @property
    def nan_guard_count(self) -> int:
        return self.state.nan_guard_count

    def step(self, grads: dict, lr: float | None = None) -> bool:
        return adamw_step(self.params, grads, self.state, lr=lr)


def poly_lr(step: int, total: int, lr0: float, power: float = 1.0) -> float:
    """Polynomial decay lr0 * (1 - step/total)^power; clamped at borders."""
    if total <= 0:
        raise ValueError(f"poly_lr: total must be positive, got {total}")
    if step < 0 or step > total:
        raise ValueError(f"poly_lr: step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power
