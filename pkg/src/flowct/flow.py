"""Rectified-flow objective and the deterministic forward-Euler sampler.

Training regresses a velocity field onto the straight-line displacement
x1 - x0 between noise and data; sampling integrates dx/dt = v(x, t) on the
fixed ascending grid t_i = i/N from t = 0, which is exact for constant
fields at any step count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class FlowError(Exception):
    pass


class NonFiniteError(FlowError):
    pass


@dataclass
class FlowBatch:
    """Paired noise/data latents with per-sample times and conditioning."""

    x0: list
    x1: list
    t: np.ndarray
    cond: list

    def __post_init__(self):
        n = len(self.x0)
        if not (len(self.x1) == n and len(self.t) == n and len(self.cond) == n):
            raise FlowError(f"batch fields disagree on length: {len(self.x0)}/{len(self.x1)}/"
                            f"{len(self.t)}/{len(self.cond)}")
        for a, b in zip(self.x0, self.x1):
            if np.shape(a) != np.shape(b):
                raise FlowError(f"x0 shape {np.shape(a)} != x1 shape {np.shape(b)}")
        t = np.asarray(self.t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
            raise FlowError(f"times must lie in [0, 1], got {t}")


@dataclass
class SamplerConfig:
    steps: int = 30
    seed: int = 0
    shape: tuple | None = field(default=None)

    def __post_init__(self):
        if self.steps < 1:
            raise FlowError(f"sampler steps must be >= 1, got {self.steps}")


def interpolate(x0, x1, t: float):
    """Linear path x_t = (1 - t) x0 + t x1; endpoints are exact."""
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise FlowError(f"interpolation time {t} outside [0, 1]")
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        a = x0 if isinstance(x0, Tensor) else Tensor(x0)
        b = x1 if isinstance(x1, Tensor) else Tensor(x1)
        if a.shape != b.shape:
            raise FlowError(f"interpolate: shape mismatch {a.shape} vs {b.shape}")
        return ad.add(ad.mul(a, 1.0 - t), ad.mul(b, t))
    a = np.asarray(x0)
    b = np.asarray(x1)
    if a.shape != b.shape:
        raise FlowError(f"interpolate: shape mismatch {a.shape} vs {b.shape}")
    one_minus = np.asarray(1.0 - t, dtype=a.dtype)
    tt = np.asarray(t, dtype=a.dtype)
    return a * one_minus + b * tt


def flow_loss(velocity_fn, batch: FlowBatch) -> Tensor:
    """Mean squared error between predicted velocity and x1 - x0.

    velocity_fn(x_t: Tensor, t: float, cond) must return a Tensor of the
    same shape; per-sample voxel means are averaged over the batch.
    """
    total = None
    n = len(batch.x0)
    for i in range(n):
        x0 = np.asarray(batch.x0[i])
        x1 = np.asarray(batch.x1[i])
        t = float(batch.t[i])
        x_t = interpolate(x0, x1, t)
        pred = velocity_fn(Tensor(x_t), t, batch.cond[i])
        if not np.all(np.isfinite(pred.data)):
            raise NonFiniteError(f"flow_loss: non-finite velocity prediction for sample {i}")
        target = Tensor((x1 - x0).astype(pred.dtype))
        diff = pred - target
        term = ad.mean(ad.mul(diff, diff))
        total = term if total is None else total + term
    return ad.mul(total, 1.0 / n)


def sample(velocity_fn, cond, config: SamplerConfig, x0: np.ndarray | None = None) -> np.ndarray:
    """Integrate the velocity ODE with N forward-Euler steps from t = 0.

    velocity_fn(x: ndarray, t: float, cond) -> ndarray.  The start point
    is x0 if given, otherwise standard normal under config.seed with
    config.shape.
    """
    if x0 is None:
        if config.shape is None:
            raise FlowError("sample: either x0 or config.shape is required")
        rng = np.random.default_rng(config.seed)
        x = rng.standard_normal(config.shape).astype(np.float32)
    else:
        x = np.array(x0, copy=True)
    n = int(config.steps)
    for i in range(n):
        t_i = i / n
        v = np.asarray(velocity_fn(x, t_i, cond))
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"sample: non-finite velocity at step {i} (t={t_i})")
        x = x + v / float(n)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"sample: non-finite state after step {i} (t={t_i})")
    return x


def sample_timesteps(count: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform times on [0, 1]."""
    if count < 1:
        raise FlowError(f"sample_timesteps: count must be >= 1, got {count}")
    return rng.uniform(0.0, 1.0, size=count)
