"""Per-case wiring of datasets, networks, residuals, training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as D
from .metrics import EvalReport, cond_mean_std_error, per_pixel_w1, residual_stats
from .models import NetConfig, VelocityNet
from .residuals import ResidualOperator
from .sampler import SamplerConfig, net_model, sample
from .trainer import TrainConfig, Trainer

CASES = ("circle", "darcy", "divfree", "algebraic")


@dataclass
class DataConfig:
    n: int = 512
    N: int = 32
    seed: int = 0
    per_condition: int = 1
    cg_tol: float = 1e-8
    corr_length: float = 0.15
    variance: float = 1.0


DEFAULT_DATA = {
    "circle": DataConfig(n=4096),
    "darcy": DataConfig(n=512, N=32),
    "divfree": DataConfig(n=512, N=32, per_condition=8),
    "algebraic": DataConfig(n=512, N=16, per_condition=8),
}

DEFAULT_NET = {
    "circle": dict(variant="mlp", width=64, depth=3, time_dim=16, time_base=30.0, time_ratio=30.0),
    "darcy": dict(variant="conv", width=24, depth=3, time_dim=16, cond_embed_dim=32,
                  padding="replicate", time_base=30.0, time_ratio=30.0),
    "divfree": dict(variant="conv", width=24, depth=3, time_dim=16, cond_embed_dim=32,
                    padding="periodic", time_base=30.0, time_ratio=30.0),
    "algebraic": dict(variant="conv", width=24, depth=3, time_dim=16, cond_embed_dim=32,
                      padding="replicate", time_base=30.0, time_ratio=30.0),
}


def check_case(case):
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}; expected one of {CASES}")


def make_dataset(case, cfg: DataConfig | None = None) -> D.GridDataset:
    """Physical-unit dataset for ``case``."""
    check_case(case)
    cfg = cfg or DEFAULT_DATA[case]
    if case == "circle":
        return D.gen_circle(cfg.n, cfg.seed)
    if case == "darcy":
        spec = D.GrfSpec(cfg.corr_length, cfg.variance, seed=cfg.seed)
        return D.gen_darcy(cfg.n, cfg.N, spec, cfg.cg_tol, cfg.seed)
    n_cond = max(1, cfg.n // cfg.per_condition)
    if case == "divfree":
        cond_rng = np.random.default_rng([cfg.seed, 2**31 - 1])
        levels = cond_rng.uniform(*D.REYNOLDS_RANGE, size=n_cond)
        return D.gen_divfree(n_cond * cfg.per_condition, cfg.N, np.repeat(levels, cfg.per_condition), cfg.seed)
    return D.gen_algebraic(n_cond, cfg.per_condition, cfg.N, cfg.seed)


def residual_operator(case, N=None) -> ResidualOperator:
    check_case(case)
    if case == "circle":
        return ResidualOperator("circle")
    if case == "algebraic":
        return ResidualOperator("algebraic-stall")
    if not N:
        raise ValueError(f"residual_operator: case {case!r} needs the grid size N")
    h = 1.0 / N
    if case == "darcy":
        return ResidualOperator("darcy", h=h)
    return ResidualOperator("divergence", h=h, scheme="spectral")


def residual_fn(op: ResidualOperator, stats):
    """Residual of a network-unit prediction, evaluated on denormalised fields."""
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)

    def fn(x):
        x = ad.as_tensor(x)
        shp = (1, mean.size) + (1,) * (x.ndim - 2)
        return op(x * std.reshape(shp) + mean.reshape(shp))

    return fn


def net_config(case, ds: D.GridDataset, seed=0, **overrides) -> NetConfig:
    kw = dict(DEFAULT_NET[case])
    kw.update(overrides)
    return NetConfig(field_shape=tuple(ds.samples.shape[1:]), cond_dim=ds.cond_dim, seed=seed, **kw)


@dataclass
class Run:
    """A trained model together with what is needed to sample and evaluate it."""

    case: str
    trainer: Trainer
    stats: dict
    op: ResidualOperator
    extra: dict = field(default_factory=dict)


def prepare(case, ds: D.GridDataset, train_cfg: TrainConfig, net_overrides=None, seed=None):
    """Normalise ``ds`` and build an untrained :class:`Run`."""
    norm, stats = D.normalize(ds)
    seed = train_cfg.seed if seed is None else seed
    net = VelocityNet(net_config(case, ds, seed=seed, **(net_overrides or {})))
    N = ds.samples.shape[-1] if ds.samples.ndim == 4 else None
    op = residual_operator(case, N)
    tr = Trainer(net, train_cfg, norm.samples, norm.cond, residual_fn(op, stats))
    return Run(case, tr, stats, op)


def train(case, ds, train_cfg: TrainConfig, net_overrides=None, log_path=None, callback=None) -> Run:
    run = prepare(case, ds, train_cfg, net_overrides)
    run.trainer.run(log_path=log_path, callback=callback)
    return run


def generate(net: VelocityNet, params, stats, n, sampler_cfg: SamplerConfig, cond=None, batch=512):
    """Samples in physical units; ``cond`` holds raw conditioning rows (one per sample)."""
    cn = D.normalize_cond(cond, stats) if cond is not None else None
    rng = np.random.default_rng(sampler_cfg.seed)
    shape = tuple(net.config.field_shape)
    out = []
    model = net_model(net, params)
    for start in range(0, n, batch):
        m = min(batch, n - start)
        c = None if cn is None else cn[start:start + m]
        out.append(sample(model, (m,) + shape, c, sampler_cfg, rng))
    x = np.concatenate(out, axis=0)
    return D.denormalize(x, stats)


def ema_params(trainer: Trainer):
    return trainer.state.ema.as_params()


def evaluate(case, gen, ref: D.GridDataset, gen_cond=None, op=None) -> EvalReport:
    """Residual statistics of ``gen`` plus distribution distances to ``ref``."""
    gen = np.asarray(getattr(gen, "samples", gen), dtype=np.float64)
    if gen.shape[1:] != ref.samples.shape[1:]:
        raise ValueError(f"evaluate: generated shape {gen.shape[1:]} differs from reference {ref.samples.shape[1:]}")
    op = op or residual_operator(case, gen.shape[-1] if gen.ndim == 4 else None)
    with ad.no_grad():
        R = op(gen).data
    rs = residual_stats(R)
    w1 = per_pixel_w1(gen, ref.samples)
    mean_mse = std_mse = None
    if ref.cond is not None and gen_cond is not None:
        try:
            ms = cond_mean_std_error(gen, gen_cond, ref.samples, ref.cond)
            mean_mse, std_mse = ms["mean_mse"], ms["std_mse"]
        except ValueError:
            pass
    return EvalReport(rs["mae"], rs["mse"], rs["min"], rs["max"], [float(v) for v in w1],
                      float(np.mean(w1)), mean_mse, std_mse, int(gen.shape[0]), len(ref))


def sample_and_evaluate(run: Run, ref: D.GridDataset, n, sampler_cfg: SamplerConfig, use_ema=True):
    tr = run.trainer
    params = ema_params(tr) if use_ema else tr.net.params
    cond = None
    if ref.cond is not None:
        reps = int(np.ceil(n / len(ref)))
        cond = np.tile(ref.cond, (reps, 1))[:n]
    gen = generate(tr.net, params, run.stats, n, sampler_cfg, cond)
    return gen, evaluate(run.case, gen, ref, cond, run.op)


# ------------------------------------------------------------------ ablation

ABLATION_AXES = ("unroll", "sigma_min", "time_dist", "mode", "power", "sampler", "steps")


def axis_variants(axis, values):
    """(label, TrainConfig overrides, SamplerConfig overrides) for each axis value."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    out = []
    for v in values:
        if axis == "unroll":
            if v in ("fm", "fm-only", 0):
                out.append(("fm-only", {"mode": "fm-only", "unroll": 1}, {}))
            else:
                out.append((f"pbfm-{int(v)}", {"mode": "config", "unroll": int(v)}, {}))
        elif axis == "sigma_min":
            out.append((str(v), {"sigma_min": float(v)}, {}))
        elif axis == "time_dist":
            out.append((str(v), {"time_distribution": str(v)}, {}))
        elif axis == "mode":
            if v in ("config", "fm-only"):
                out.append((str(v), {"mode": str(v)}, {}))
            else:
                beta = float(v)
                out.append((f"beta={beta:g}", {"mode": "weighted", "w_fm": 1.0, "w_r": beta}, {}))
        elif axis == "power":
            out.append((f"p={float(v):g}", {"power": float(v)}, {}))
        elif axis == "sampler":
            out.append((str(v), {}, {"mode": str(v)}))
        elif axis == "steps":
            out.append((f"steps={int(v)}", {}, {"steps": int(v)}))
    return out


def run_ablation(case, ds, axis, values, train_cfg: TrainConfig, sampler_cfg: SamplerConfig,
                 n_eval=1024, net_overrides=None, log_dir=None):
    """Train (or re-sample) once per axis value with shared seeds; returns summary rows."""
    variants = axis_variants(axis, values)
    rows = []
    shared = None
    for label, t_over, s_over in variants:
        if t_over or shared is None:
            if "unroll" in t_over and train_cfg.curriculum is not None:
                t_over = dict(t_over, curriculum=None)
            tcfg = replace(train_cfg, **t_over)
            log = None if log_dir is None else f"{log_dir}/train_{label}.csv"
            run = train(case, ds, tcfg, net_overrides, log_path=log)
            if not t_over:
                shared = run
        else:
            run = shared
        scfg = replace(sampler_cfg, **s_over)
        _, report = sample_and_evaluate(run, ds, n_eval, scfg)
        rows.append({"axis": axis, "value": label, "residual_mae": report.residual_mae,
                     "residual_mse": report.residual_mse, "w1": report.w1_mean,
                     "mean_mse": report.mean_mse, "std_mse": report.std_mse})
    return rows
