"""Velocity-field networks and EMA parameter tracking.

Both networks are pure functions of ``(x_t, t, c, params)``; a network object
only holds its configuration and a default parameter set, so EMA shadows or
checkpointed parameters can be swapped in per call.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def embed_time(t, dim, base=1.0, ratio=100.0):
    """Sinusoidal features of ``t``: ``[sin(f_k t)..., cos(f_k t)...]``.

    Frequencies run geometrically from ``base`` down to ``base / ratio``.
    ``t`` may be a scalar or a 1-D array; the result has shape ``(..., dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embed_time: dim must be a positive even integer, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.array([base])
    else:
        freqs = base * ratio ** (-np.arange(half) / (half - 1))
    arg = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@dataclass
class NetConfig:
    """Architecture of a :class:`VelocityNet`.

    ``field_shape`` is the per-sample shape: ``(D,)`` for the MLP and
    ``(C, H, W)`` for the conv net.
    """

    variant: str
    field_shape: tuple
    cond_dim: int = 0
    width: int = 128
    depth: int = 4
    time_dim: int = 32
    cond_embed_dim: int = 32
    padding: str = "periodic"
    time_base: float = 1000.0
    time_ratio: float = 10000.0
    zero_init_output: bool = True
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["field_shape"] = list(self.field_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["field_shape"] = tuple(d["field_shape"])
        return cls(**d)


def _dense_init(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def _conv_init(rng, cin, cout):
    return rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(cout, cin, 3, 3))


def _linear(x, params, name):
    return ad.matmul(x, params[name + ".w"]) + params[name + ".b"]


class VelocityNet:
    """Velocity field ``u(x_t, t, c)`` (MLP or small conv residual net)."""

    def __init__(self, config: NetConfig):
        if config.variant not in ("mlp", "conv"):
            raise ValueError(f"unknown network variant {config.variant!r}")
        if config.variant == "conv" and len(config.field_shape) != 3:
            raise ValueError("conv variant needs field_shape (C, H, W)")
        if config.variant == "mlp" and len(config.field_shape) != 1:
            raise ValueError("mlp variant needs field_shape (D,)")
        self.config = config
        self.params = self._init_params(np.random.default_rng(config.seed))

    # ------------------------------------------------------------- params

    def _init_params(self, rng):
        cfg = self.config
        p = OrderedDict()

        def dense(name, fan_in, fan_out, zero=False):
            p[name + ".w"] = np.zeros((fan_in, fan_out)) if zero else _dense_init(rng, fan_in, fan_out)
            p[name + ".b"] = np.zeros(fan_out)

        if cfg.cond_dim:
            dense("cond.0", cfg.cond_dim, cfg.cond_embed_dim)
            dense("cond.1", cfg.cond_embed_dim, cfg.cond_embed_dim)

        if cfg.variant == "mlp":
            d = cfg.field_shape[0]
            fan_in = d + cfg.time_dim + (cfg.cond_embed_dim if cfg.cond_dim else 0)
            for i in range(cfg.depth):
                dense(f"hidden.{i}", fan_in if i == 0 else cfg.width, cfg.width)
            dense("out", cfg.width, d, zero=cfg.zero_init_output)
        else:
            c = cfg.field_shape[0]
            w = cfg.width
            emb = cfg.cond_embed_dim
            dense("time.0", cfg.time_dim, emb)
            dense("time.1", emb, emb)
            p["conv_in.w"] = _conv_init(rng, c, w)
            p["conv_in.b"] = np.zeros(w)
            for i in range(cfg.depth):
                # modulation starts at identity (scale 0, shift 0)
                dense(f"block.{i}.mod", emb, 2 * w, zero=True)
                p[f"block.{i}.conv.w"] = _conv_init(rng, w, w)
                p[f"block.{i}.conv.b"] = np.zeros(w)
            p["conv_out.w"] = np.zeros((c, w, 3, 3)) if cfg.zero_init_output else _conv_init(rng, w, c)
            p["conv_out.b"] = np.zeros(c)
        return OrderedDict((k, Tensor(v, requires_grad=True)) for k, v in p.items())

    def parameter_names(self):
        return list(self.params)

    def num_parameters(self):
        return int(np.sum([v.size for v in self.params.values()]))

    # ------------------------------------------------------------- forward

    def __call__(self, x_t, t, c=None, params=None):
        return self.forward(x_t, t, c, params)

    def forward(self, x_t, t, c=None, params=None):
        cfg = self.config
        params = self.params if params is None else params
        x_t = ad.as_tensor(x_t)
        if x_t.ndim != len(cfg.field_shape) + 1 or tuple(x_t.shape[1:]) != tuple(cfg.field_shape):
            raise ad.ShapeError(
                f"VelocityNet: input extents {x_t.shape}, expected (batch, {', '.join(map(str, cfg.field_shape))})"
            )
        B = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        temb = Tensor(embed_time(t, cfg.time_dim, cfg.time_base, cfg.time_ratio))
        cemb = self._cond_embedding(c, B, params)
        if cfg.variant == "mlp":
            return self._forward_mlp(x_t, temb, cemb, params)
        return self._forward_conv(x_t, temb, cemb, params)

    def _cond_embedding(self, c, B, params):
        cfg = self.config
        if not cfg.cond_dim:
            if c is not None and np.size(c) > 0:
                raise ad.ShapeError("VelocityNet: conditioning given to an unconditioned network")
            return None
        if c is None:
            raise ad.ShapeError(f"VelocityNet: network expects conditioning of dimension {cfg.cond_dim}")
        c = ad.as_tensor(np.asarray(c, dtype=np.float64) if not isinstance(c, Tensor) else c)
        if c.shape != (B, cfg.cond_dim):
            raise ad.ShapeError(f"VelocityNet: conditioning extents {c.shape}, expected ({B}, {cfg.cond_dim})")
        h = ad.silu(_linear(c, params, "cond.0"))
        return _linear(h, params, "cond.1")

    def _forward_mlp(self, x, temb, cemb, params):
        parts = [x, temb] if cemb is None else [x, temb, cemb]
        h = ad.concat(parts, axis=1)
        for i in range(self.config.depth):
            h = ad.silu(_linear(h, params, f"hidden.{i}"))
        return _linear(h, params, "out")

    def _forward_conv(self, x, temb, cemb, params):
        cfg = self.config
        w = cfg.width
        pad = cfg.padding
        emb = _linear(ad.silu(_linear(temb, params, "time.0")), params, "time.1")
        if cemb is not None:
            emb = emb + cemb
        emb = ad.silu(emb)
        h = ad.conv3x3(x, params["conv_in.w"], params["conv_in.b"], pad)
        for i in range(cfg.depth):
            mod = _linear(emb, params, f"block.{i}.mod")
            scale = ad.reshape(mod[:, :w], (-1, w, 1, 1))
            shift = ad.reshape(mod[:, w:], (-1, w, 1, 1))
            a = ad.silu(h * (scale + 1.0) + shift)
            h = h + ad.conv3x3(a, params[f"block.{i}.conv.w"], params[f"block.{i}.conv.b"], pad)
        return ad.conv3x3(ad.silu(h), params["conv_out.w"], params["conv_out.b"], pad)


# ----------------------------------------------------------------- flat views


def flatten(arrays) -> np.ndarray:
    """Concatenate per-parameter arrays in parameter order into one vector."""
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec, like) -> list:
    out, i = [], 0
    for ref in like:
        shape = ref.shape
        n = int(np.prod(shape))
        out.append(vec[i:i + n].reshape(shape))
        i += n
    if i != vec.size:
        raise ValueError(f"unflatten: vector length {vec.size} does not match parameter count {i}")
    return out


def clone_params(params, requires_grad=False):
    return OrderedDict((k, Tensor(v.data.copy(), requires_grad=requires_grad)) for k, v in params.items())


# ----------------------------------------------------------------------- EMA


@dataclass
class EmaState:
    decay: float
    shadow: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def from_params(cls, params, decay=0.999):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        return cls(decay, OrderedDict((k, v.data.copy()) for k, v in params.items()))

    def as_params(self):
        return OrderedDict((k, Tensor(v)) for k, v in self.shadow.items())


def ema_update(ema: EmaState, live) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * live, elementwise."""
    if list(ema.shadow) != list(live):
        raise ValueError("ema_update: parameter structures differ")
    d = ema.decay
    new = OrderedDict()
    for k, s in ema.shadow.items():
        v = live[k].data if isinstance(live[k], Tensor) else np.asarray(live[k])
        if v.shape != s.shape:
            raise ValueError(f"ema_update: parameter {k!r} has shape {v.shape}, shadow {s.shape}")
        new[k] = d * s + (1.0 - d) * v
    return EmaState(d, new)
