"""Euler samplers: deterministic integration and the early-phase re-noising scheme."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .models import NetConfig, VelocityNet


class MissingEmaError(RuntimeError):
    """Checkpoint has no EMA shadow parameters."""


_MODES = {"det": "deterministic", "deterministic": "deterministic",
          "stoch": "stochastic", "stochastic": "stochastic"}


@dataclass
class SamplerConfig:
    steps: int = 20
    mode: str = "deterministic"
    t_star: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if not 0.0 <= self.t_star <= 1.0:
            raise ValueError("t_star must lie in [0, 1]")
        try:
            self.mode = _MODES[self.mode]
        except KeyError:
            raise ValueError(f"unknown sampler mode {self.mode!r}") from None

    def to_dict(self):
        return asdict(self)


def _as_array(u):
    return u.data if isinstance(u, ad.Tensor) else np.asarray(u, dtype=np.float64)


def sample(model, shape, c=None, cfg: SamplerConfig | None = None, rng=None, x0=None):
    """Integrate ``model(x, t, c)`` from noise at t=0 to t=1.

    ``shape`` includes the batch dimension. ``x0`` overrides the initial
    noise; ``rng`` (default: seeded from ``cfg.seed``) drives the initial
    noise and any re-noising draws, in that order.
    """
    cfg = cfg or SamplerConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    shape = tuple(shape)
    x = rng.standard_normal(shape) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != shape:
        raise ad.ShapeError(f"sample: initial state has extents {x.shape}, requested {shape}")
    n = cfg.steps
    dt = 1.0 / n
    stochastic = cfg.mode == "stochastic"
    with ad.no_grad():
        for i in range(n):
            t = i / n
            u = _as_array(model(x, np.full(shape[0], t), c))
            if u.shape != shape:
                raise ad.ShapeError(f"sample: model output {u.shape} does not match requested {shape}")
            if stochastic and t < cfg.t_star:
                x1 = x + (1.0 - t) * u
                t_next = (i + 1) / n
                if t_next < 1.0:
                    x = (1.0 - t_next) * rng.standard_normal(shape) + t_next * x1
                else:
                    x = x1
            else:
                x = x + dt * u
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("sample: generated batch contains non-finite values")
    return x


def net_model(net: VelocityNet, params=None):
    """Adapter turning a network and a parameter set into ``model(x, t, c)``."""
    def model(x, t, c):
        return net(x, t, c, params)
    return model


def sample_with_ema(checkpoint, n, cfg: SamplerConfig | None = None, c=None, rng=None, x0=None):
    """Draw ``n`` samples from a checkpoint using its EMA shadow weights."""
    if checkpoint.ema is None:
        raise MissingEmaError("checkpoint has no EMA state; cannot sample with EMA parameters")
    net = VelocityNet(NetConfig.from_dict(checkpoint.net_config))
    params = {k: ad.Tensor(v) for k, v in checkpoint.ema.items()}
    shape = (n,) + tuple(net.config.field_shape)
    return sample(net_model(net, params), shape, c, cfg, rng, x0)
