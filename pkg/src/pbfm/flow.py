"""Optimal-transport conditional flow path and the flow-matching loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TIME_DISTRIBUTIONS = ("uniform", "logit-normal")


@dataclass
class FlowConfig:
    sigma_min: float = 0.0
    time_distribution: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError(f"sigma_min must lie in [0, 1), got {self.sigma_min}")
        self.time_distribution = normalize_time_distribution(self.time_distribution)


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u_target: np.ndarray
    c: np.ndarray | None = None


def normalize_time_distribution(name):
    key = name.replace("_", "-").lower()
    if key == "logitnormal":
        key = "logit-normal"
    if key not in TIME_DISTRIBUTIONS:
        raise ValueError(f"unknown time distribution {name!r}; expected uniform or logit-normal")
    return key


def sample_time(n, dist, rng):
    """Draw ``n`` times in [0, 1]: uniform, or sigmoid of a standard normal."""
    if n < 1:
        raise ValueError("sample_time: n must be >= 1")
    dist = normalize_time_distribution(dist)
    if dist == "uniform":
        return rng.random(n)
    z = rng.standard_normal(n)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _time_column(t, ndim):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim)) if t.ndim else t


def interpolate(x0, x1, t, sigma_min=0.0):
    """psi_t = (1 - (1 - sigma_min) t) x0 + t x1; ``t`` scalar or per sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ad.ShapeError(f"interpolate: x0 extents {x0.shape} differ from x1 extents {x1.shape}")
    tt = _time_column(t, x0.ndim)
    return (1.0 - (1.0 - sigma_min) * tt) * x0 + tt * x1


def target_velocity(x, x1, t, sigma_min=0.0):
    """Conditional velocity (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)."""
    x = np.asarray(x, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x.shape != x1.shape:
        raise ad.ShapeError(f"target_velocity: x extents {x.shape} differ from x1 extents {x1.shape}")
    tt = _time_column(t, x.ndim)
    denom = 1.0 - (1.0 - sigma_min) * tt
    if np.any(denom <= 0.0):
        raise ValueError("target_velocity: undefined at t = 1 with sigma_min = 0")
    return (x1 - (1.0 - sigma_min) * x) / denom


def make_flow_sample(x1, rng, flow: FlowConfig, c=None) -> FlowSample:
    """Fresh noise and times for a data batch, with the interpolant and target."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    t = sample_time(x1.shape[0], flow.time_distribution, rng)
    x_t = interpolate(x0, x1, t, flow.sigma_min)
    u = target_velocity(x_t, x1, t, flow.sigma_min)
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, u_target=u, c=c)


def fm_loss(u_pred, u_target):
    """Mean squared error between predicted and target velocities."""
    u_pred = ad.as_tensor(u_pred)
    u_target = ad.as_tensor(u_target)
    if u_pred.shape != u_target.shape:
        raise ad.ShapeError(f"fm_loss: prediction extents {u_pred.shape} differ from target {u_target.shape}")
    diff = u_pred - u_target
    return ad.mean(diff * diff)
