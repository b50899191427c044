"""Training step with temporal unrolling and conflict-free gradient updates."""
from __future__ import annotations

import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .combiner import GradientPair, combine
from .fileio import Checkpoint
from .flow import FlowConfig, FlowSample, fm_loss, make_flow_sample, normalize_time_distribution
from .models import EmaState, NetConfig, VelocityNet, ema_update, flatten, unflatten
from .residuals import residual_loss

logger = logging.getLogger(__name__)

UPDATE_MODES = ("config", "weighted", "fm-only")
LOG_COLUMNS = ("iteration", "L_fm", "L_r", "grad_norm_fm", "grad_norm_r", "unroll_n", "wall_ms")


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    unroll: int = 1
    power: float = 1.0
    sigma_min: float = 0.0
    time_distribution: str = "uniform"
    mode: str = "config"
    w_fm: float = 1.0
    w_r: float = 1.0
    curriculum: list | None = None
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.unroll < 1:
            raise ValueError("unroll (n_max) must be >= 1")
        if self.power < 0:
            raise ValueError("residual power must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.mode not in UPDATE_MODES:
            raise ValueError(f"unknown update mode {self.mode!r}; expected one of {UPDATE_MODES}")
        self.time_distribution = normalize_time_distribution(self.time_distribution)
        if self.curriculum is not None and len(self.curriculum) != self.unroll - 1:
            raise ValueError("curriculum needs exactly unroll - 1 breakpoints")

    @property
    def flow(self):
        return FlowConfig(self.sigma_min, self.time_distribution)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ schedule


def curriculum(iteration, total, n_max, breakpoints=None):
    """Unroll steps for ``iteration``: 1 during the first phase, n_max in the last.

    By default the run is split into ``n_max`` equal phases. ``breakpoints``
    (fractions of the run, ``n_max - 1`` of them) overrides the phase edges.
    """
    if n_max <= 1:
        return 1
    progress = iteration / max(total, 1)
    if breakpoints is None:
        return min(n_max, int(math.floor(progress * n_max)) + 1)
    return 1 + int(np.sum(np.asarray(breakpoints) <= progress))


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params.values()],
                   [np.zeros_like(p.data) for p in params.values()], 0)


def optimizer_step(params, grads, opt: OptimizerState, lr, beta1=0.5, beta2=0.999, weight_decay=0.0, eps=1e-8):
    """AdamW with bias correction; updates ``params`` and ``opt`` in place.

    ``grads`` is either a flat vector in parameter order or a list of arrays.
    """
    values = list(params.values())
    if isinstance(grads, np.ndarray) and grads.ndim == 1:
        grads = unflatten(grads, [p.data for p in values])
    opt.step += 1
    bc1 = 1.0 - beta1 ** opt.step
    bc2 = 1.0 - beta2 ** opt.step
    for p, g, m, v in zip(values, grads, opt.m, opt.v):
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


# ------------------------------------------------------------------- unroll


def unroll_predict(model: Callable, x_t, t, c, n, u_first=None):
    """Estimate the final state by ``n`` Euler steps from ``(x_t, t)`` to 1.

    ``u_first`` is the velocity already evaluated at ``(x_t, t)``; it is
    reused for the first step. Returns ``(x1_estimate, u_first)``.
    """
    if n < 1:
        raise ValueError("unroll_predict: n must be >= 1")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1.0):
        raise ValueError("unroll_predict: starting time must be < 1")
    x_t = ad.as_tensor(x_t)
    tb = np.broadcast_to(t, (x_t.shape[0],)) if t.ndim else np.full(x_t.shape[0], float(t))
    col = tb.reshape((-1,) + (1,) * (x_t.ndim - 1))
    dt = (1.0 - col) / n
    if u_first is None:
        u_first = model(x_t, tb, c)
    x = x_t + u_first * dt
    tt = tb.copy()
    dt_flat = (1.0 - tb) / n
    for _ in range(1, n):
        tt = tt + dt_flat
        x = x + model(x, tt, c) * dt
    return x, u_first


# -------------------------------------------------------------------- state


@dataclass
class TrainState:
    net: VelocityNet
    ema: EmaState
    opt: OptimizerState
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, net, cfg: TrainConfig):
        return cls(net=net, ema=EmaState.from_params(net.params, cfg.ema_decay),
                   opt=OptimizerState.zeros_like(net.params),
                   rng=np.random.default_rng(cfg.seed), step=0)


def _check_finite(name, value, step):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite {name} at iteration {step}")


def train_step(state: TrainState, batch: FlowSample, n, cfg: TrainConfig, residual_fn=None):
    """One optimisation step; returns a metrics dict.

    ``residual_fn`` maps a predicted final state (network units) to a
    residual field; it is required unless ``cfg.mode == 'fm-only'``.
    """
    net = state.net
    params = net.params
    plist = list(params.values())

    def model(x, t, c):
        return net(x, t, c, params)

    u = model(batch.x_t, batch.t, batch.c)
    loss_fm = fm_loss(u, batch.u_target)
    _check_finite("L_fm", loss_fm.data, state.step)
    g_fm = flatten(ad.grad(loss_fm, plist))
    _check_finite("gradient of L_fm", g_fm, state.step)

    loss_r = math.nan
    g_r = np.zeros_like(g_fm)
    if cfg.mode != "fm-only":
        if residual_fn is None:
            raise ValueError(f"update mode {cfg.mode!r} needs a residual function")
        x1_est, _ = unroll_predict(model, batch.x_t, batch.t, batch.c, n, u_first=u)
        lr_t = residual_loss(residual_fn(x1_est), batch.t, cfg.power)
        _check_finite("L_r", lr_t.data, state.step)
        loss_r = lr_t.item()
        g_r = flatten(ad.grad(lr_t, plist))
        _check_finite("gradient of L_r", g_r, state.step)

    pair = combine(GradientPair(g_fm, g_r), cfg.mode, cfg.w_fm, cfg.w_r)
    if pair.status == "anti-parallel":
        logger.warning("iteration %d: anti-parallel gradients, zero update", state.step)
    optimizer_step(params, pair.g_update, state.opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps)
    state.ema = ema_update(state.ema, params)
    state.step += 1
    return {
        "L_fm": loss_fm.item(),
        "L_r": loss_r,
        "grad_norm_fm": float(np.linalg.norm(g_fm)),
        "grad_norm_r": float(np.linalg.norm(g_r)),
        "grad_norm_update": float(np.linalg.norm(pair.g_update)),
        "unroll_n": n,
        "status": pair.status,
    }


# ------------------------------------------------------------------- loop


@dataclass
class Trainer:
    """Runs :func:`train_step` over a dataset held in network units.

    ``data`` has shape (N, *field_shape); ``cond`` is (N, cond_dim) or None.
    """

    net: VelocityNet
    cfg: TrainConfig
    data: np.ndarray
    cond: np.ndarray | None = None
    residual_fn: Callable | None = None
    state: TrainState | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.state is None:
            self.state = TrainState.create(self.net, self.cfg)

    def next_batch(self):
        rng = self.state.rng
        idx = rng.integers(0, self.data.shape[0], self.cfg.batch_size)
        c = None if self.cond is None else self.cond[idx]
        return make_flow_sample(self.data[idx], rng, self.cfg.flow, c)

    def run(self, until=None, log_path=None, callback=None):
        """Train up to iteration ``until`` (default: cfg.iterations)."""
        cfg = self.cfg
        until = cfg.iterations if until is None else until
        writer = fh = None
        if log_path is not None:
            new = self.state.step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(LOG_COLUMNS)
        window = []
        t0 = time.perf_counter()
        try:
            while self.state.step < until:
                it = self.state.step
                n = curriculum(it, cfg.iterations, cfg.unroll, cfg.curriculum)
                metrics = train_step(self.state, self.next_batch(), n, cfg, self.residual_fn)
                window.append(metrics)
                if (it + 1) % cfg.log_every == 0 or self.state.step == until:
                    row = {
                        "iteration": it + 1,
                        "L_fm": float(np.mean([m["L_fm"] for m in window])),
                        "L_r": float(np.mean([m["L_r"] for m in window])),
                        "grad_norm_fm": float(np.mean([m["grad_norm_fm"] for m in window])),
                        "grad_norm_r": float(np.mean([m["grad_norm_r"] for m in window])),
                        "unroll_n": n,
                        "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
                    }
                    self.history.append(row)
                    if writer is not None:
                        writer.writerow([row[k] for k in LOG_COLUMNS])
                        fh.flush()
                    window = []
                if callback is not None:
                    callback(self, metrics)
        finally:
            if fh is not None:
                fh.close()
        return self.history


# --------------------------------------------------------------- checkpoints


def to_checkpoint(trainer: Trainer, extra=None) -> Checkpoint:
    """Snapshot of everything needed to resume ``trainer`` bit-identically."""
    st = trainer.state
    return Checkpoint(
        net_config=trainer.net.config.to_dict(),
        train_config=trainer.cfg.to_dict(),
        step=st.step,
        live=OrderedDict((k, v.data.copy()) for k, v in trainer.net.params.items()),
        ema=OrderedDict((k, v.copy()) for k, v in st.ema.shadow.items()),
        ema_decay=st.ema.decay,
        opt_m=[m.copy() for m in st.opt.m],
        opt_v=[v.copy() for v in st.opt.v],
        opt_step=st.opt.step,
        rng_state=st.rng.bit_generator.state,
        extra=dict(extra or {}),
    )


def restore_trainer(ckpt: Checkpoint, data, cond=None, residual_fn=None, cfg: TrainConfig | None = None) -> Trainer:
    """Rebuild a :class:`Trainer` from a checkpoint; ``cfg`` may extend the run."""
    net = VelocityNet(NetConfig.from_dict(ckpt.net_config))
    for k, v in ckpt.live.items():
        net.params[k].data = np.array(v, dtype=np.float64)
    cfg = cfg or TrainConfig(**ckpt.train_config)
    bitgen = getattr(np.random, ckpt.rng_state["bit_generator"])()
    bitgen.state = ckpt.rng_state
    ema = EmaState(ckpt.ema_decay, OrderedDict((k, np.array(v)) for k, v in ckpt.ema.items()))
    opt = OptimizerState([np.array(m) for m in ckpt.opt_m], [np.array(v) for v in ckpt.opt_v], ckpt.opt_step)
    state = TrainState(net, ema, opt, np.random.Generator(bitgen), ckpt.step)
    return Trainer(net, cfg, data, cond, residual_fn, state)
