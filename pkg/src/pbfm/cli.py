"""Command-line front end: gen-data, train, sample, eval, ablate.

Every command reads one YAML config; command-line flags override the
matching config keys. Outputs are written under ``out``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from . import experiments as E
from .fileio import FormatError, read_checkpoint, read_dataset, write_checkpoint, write_dataset
from .metrics import histogram, write_histogram_csv
from .models import NetConfig, VelocityNet
from .residuals import darcy_forcing, darcy_residual
from .sampler import MissingEmaError, SamplerConfig
from .trainer import NumericalError, TrainConfig, restore_trainer, to_checkpoint

log = logging.getLogger("pbfm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "case": None,
    "seed": 0,
    "out": "runs",
    "data": {},
    "net": {},
    "train": {"checkpoint_every": 0},
    "sampler": {"n": 1024, "steps_sweep": None},
    "paths": {"dataset": None, "checkpoint": None, "generated": None, "reference": None, "resume": None},
    "ablation": {"axis": None, "values": None, "n_eval": 1024},
}

# flag dest -> (section, key); section None means top level
FLAG_KEYS = {
    "case": (None, "case"),
    "seed": (None, "seed"),
    "out": (None, "out"),
    "steps": ("sampler", "steps"),
    "sampler": ("sampler", "mode"),
    "tstar": ("sampler", "t_star"),
    "n": ("sampler", "n"),
    "steps_sweep": ("sampler", "steps_sweep"),
    "unroll": ("train", "unroll"),
    "mode": ("train", "mode"),
    "beta": ("train", "w_r"),
    "power": ("train", "power"),
    "sigma_min": ("train", "sigma_min"),
    "time_dist": ("train", "time_distribution"),
    "iterations": ("train", "iterations"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "data": ("paths", "dataset"),
    "checkpoint": ("paths", "checkpoint"),
    "generated": ("paths", "generated"),
    "reference": ("paths", "reference"),
    "resume": ("paths", "resume"),
    "axis": ("ablation", "axis"),
    "values": ("ablation", "values"),
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# ------------------------------------------------------------------ config


def load_config(path=None, overrides=None):
    """Merge defaults, the YAML file at ``path`` and flag ``overrides``."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for k, v in loaded.items():
            if k not in cfg:
                raise ConfigError(f"{path}: unknown config key {k!r}")
            if isinstance(cfg[k], dict):
                if not isinstance(v, dict):
                    raise ConfigError(f"{path}: section {k!r} must be a mapping")
                cfg[k].update(v)
            else:
                cfg[k] = v
    for dest, value in (overrides or {}).items():
        if value is None or dest not in FLAG_KEYS:
            continue
        section, key = FLAG_KEYS[dest]
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value
    if dest_set(overrides, "beta") and not dest_set(overrides, "mode"):
        cfg["train"]["mode"] = "weighted"
    if cfg["case"] not in E.CASES:
        raise ConfigError(f"case must be one of {E.CASES}, got {cfg['case']!r}")
    return cfg


def dest_set(overrides, name):
    return bool(overrides) and overrides.get(name) is not None


def _pick(section, cls, skip=()):
    names = {f.name for f in fields(cls)} - set(skip)
    return {k: v for k, v in section.items() if k in names}


def data_config(cfg) -> E.DataConfig:
    base = asdict(E.DEFAULT_DATA[cfg["case"]])
    base.update(_pick(cfg["data"], E.DataConfig))
    base["seed"] = cfg["data"].get("seed", cfg["seed"])
    return E.DataConfig(**base)


def train_config(cfg) -> TrainConfig:
    kw = _pick(cfg["train"], TrainConfig)
    kw.setdefault("seed", cfg["seed"])
    if kw.get("curriculum") is not None:
        kw["curriculum"] = tuple(kw["curriculum"])
    return TrainConfig(**kw)


def sampler_config(cfg) -> SamplerConfig:
    kw = _pick(cfg["sampler"], SamplerConfig)
    kw.setdefault("seed", cfg["seed"])
    return SamplerConfig(**kw)


def git_describe():
    here = Path(__file__).resolve().parent
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                             text=True, timeout=10)
        if res.returncode == 0 and res.stdout.strip():
            return res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return f"v{__version__}"


def out_dir(cfg) -> Path:
    p = Path(cfg["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _path(cfg, key, default):
    v = cfg["paths"].get(key)
    return Path(v) if v else Path(cfg["out"]) / default


def _require(path: Path, what):
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def max_workers():
    raw = os.environ.get("PBFM_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PBFM_THREADS must be an integer, got {raw!r}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg):
    dcfg = data_config(cfg)
    ds = E.make_dataset(cfg["case"], dcfg)
    if cfg["case"] == "darcy":
        # the generator enforces the bound per sample; this is an independent second pass
        f = darcy_forcing(dcfg.N, ds.spec["forcing_r"], ds.spec["forcing_w"])
        R = darcy_residual(ds.samples[:, 1], ds.samples[:, 0], f, 1.0 / dcfg.N).data
        bound = 10 * dcfg.cg_tol * np.abs(f).max()
        if np.abs(R).max() > bound:
            raise NumericalError(f"darcy verification failed: max|R| {np.abs(R).max():.3e} > {bound:.3e}")
    ds.spec = dict(ds.spec, manifest={"case": cfg["case"], "seed": dcfg.seed, "data": asdict(dcfg),
                                      "code_version": git_describe()})
    path = out_dir(cfg) / "dataset.pbfm"
    write_dataset(path, ds)
    log.info("wrote %d samples to %s", len(ds), path)
    return path


def _checkpoint_extra(cfg, stats, dataset_path):
    return {"case": cfg["case"], "stats": stats, "dataset": str(dataset_path)}


def cmd_train(cfg):
    case = cfg["case"]
    ds_path = _require(_path(cfg, "dataset", "dataset.pbfm"), "dataset")
    ds = read_dataset(ds_path)
    tcfg = train_config(cfg)
    out = out_dir(cfg)
    resume = cfg["paths"].get("resume")
    if resume:
        ckpt = read_checkpoint(_require(Path(resume), "checkpoint"))
        stats = ckpt.extra["stats"]
        norm = D.normalize(ds)[0]
        op = E.residual_operator(case, ds.samples.shape[-1] if ds.samples.ndim == 4 else None)
        trainer = restore_trainer(ckpt, norm.samples, norm.cond, E.residual_fn(op, stats), tcfg)
    else:
        run = E.prepare(case, ds, tcfg, cfg["net"])
        trainer, stats = run.trainer, run.stats
    every = int(cfg["train"].get("checkpoint_every") or 0)
    extra = _checkpoint_extra(cfg, stats, ds_path)
    log_path = out / "train_log.csv"
    ckpt_path = out / "checkpoint.pbfm"
    stops = list(range(every, tcfg.iterations, every)) if every > 0 else []
    for stop in stops + [tcfg.iterations]:
        if stop <= trainer.state.step:
            continue
        trainer.run(until=stop, log_path=log_path)
        if stop != tcfg.iterations:
            write_checkpoint(out / f"checkpoint_{stop:07d}.pbfm", to_checkpoint(trainer, extra))
    write_checkpoint(ckpt_path, to_checkpoint(trainer, extra))
    log.info("trained to step %d; checkpoint %s", trainer.state.step, ckpt_path)
    return ckpt_path


def _sampling_conditions(ckpt, cfg, n):
    """Conditioning rows for ``n`` samples, cycling through the training conditions."""
    if not ckpt.net_config.get("cond_dim"):
        return None
    ref_path = cfg["paths"].get("reference") or ckpt.extra.get("dataset")
    ref = read_dataset(_require(Path(ref_path), "reference dataset"))
    levels = ref.cond
    _, first = np.unique(np.round(levels, 10), axis=0, return_index=True)
    levels = levels[np.sort(first)]
    reps = int(np.ceil(n / len(levels)))
    return np.repeat(levels, reps, axis=0)[:n]


def cmd_sample(cfg):
    ckpt_path = _require(_path(cfg, "checkpoint", "checkpoint.pbfm"), "checkpoint")
    ckpt = read_checkpoint(ckpt_path)
    if ckpt.ema is None:
        raise MissingEmaError(f"{ckpt_path} holds no EMA parameters")
    net = VelocityNet(NetConfig.from_dict(ckpt.net_config))
    stats = ckpt.extra["stats"]
    n = int(cfg["sampler"].get("n", 1024))
    base = sampler_config(cfg)
    cond = _sampling_conditions(ckpt, cfg, n)
    sweep = cfg["sampler"].get("steps_sweep")
    steps = [int(s) for s in sweep] if sweep else [base.steps]
    out = out_dir(cfg)
    channels = read_dataset(ckpt.extra["dataset"]).channels if Path(ckpt.extra["dataset"]).exists() else \
        [f"c{i}" for i in range(net.config.field_shape[0])]
    paths = []
    for s in steps:
        scfg = SamplerConfig(steps=s, mode=base.mode, t_star=base.t_star, seed=base.seed)
        gen = E.generate(net, ckpt.ema, stats, n, scfg, cond)
        ds = D.GridDataset(gen, channels, cond, spec={"sampler": scfg.to_dict(), "checkpoint_step": ckpt.step,
                                                      "code_version": git_describe()})
        name = f"samples_steps{s}.pbfm" if sweep else "samples.pbfm"
        write_dataset(out / name, ds)
        paths.append(out / name)
    log.info("wrote %s", ", ".join(map(str, paths)))
    return paths


def cmd_eval(cfg):
    gen = read_dataset(_require(_path(cfg, "generated", "samples.pbfm"), "generated samples"))
    ref = read_dataset(_require(_path(cfg, "reference", "dataset.pbfm"), "reference dataset"))
    if gen.samples.shape[1:] != ref.samples.shape[1:]:
        raise ConfigError(f"shape mismatch: generated {gen.samples.shape[1:]} vs reference {ref.samples.shape[1:]}")
    report = E.evaluate(cfg["case"], gen.samples, ref, gen.cond)
    out = out_dir(cfg)
    report.to_json(out / "eval.json")
    for i, name in enumerate(ref.channels):
        g, r = gen.samples[:, i].ravel(), ref.samples[:, i].ravel()
        lo, hi = float(min(g.min(), r.min())), float(max(g.max(), r.max()))
        if hi <= lo:
            hi = lo + 1.0
        write_histogram_csv(out / f"hist_{name}_generated.csv", histogram(g, 64, (lo, hi)))
        write_histogram_csv(out / f"hist_{name}_reference.csv", histogram(r, 64, (lo, hi)))
    log.info("residual MAE %.4g, mean W1 %.4g", report.residual_mae, report.w1_mean)
    return report


def _parse_value(v):
    if isinstance(v, str):
        try:
            return float(v) if any(ch in v for ch in ".eE") else int(v)
        except ValueError:
            return v
    return v


def _validate_axis(case, axis, values):
    if axis not in E.ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {E.ABLATION_AXES}")
    if not values:
        raise ConfigError(f"ablation axis {axis!r} needs at least one value")
    for v in values:
        if axis == "unroll" and v not in ("fm", "fm-only", 0) and not (isinstance(v, int) and v >= 1):
            raise ConfigError(f"unroll values must be positive integers or 'fm-only', got {v!r}")
        if axis == "power" and not (isinstance(v, (int, float)) and v >= 0):
            raise ConfigError(f"power values must be non-negative numbers, got {v!r}")
        if axis == "mode" and isinstance(v, str) and v not in ("config", "fm-only"):
            raise ConfigError(f"mode values must be 'config', 'fm-only' or a weight, got {v!r}")
        if axis == "steps" and not (isinstance(v, int) and v >= 1):
            raise ConfigError(f"steps values must be positive integers, got {v!r}")


def _ablate_one(args):
    case, ds_path, axis, value, tcfg, scfg, n_eval, net, sub = args
    Path(sub).mkdir(parents=True, exist_ok=True)
    ds = read_dataset(ds_path)
    return E.run_ablation(case, ds, axis, [value], tcfg, scfg, n_eval, net, log_dir=sub)[0]


ABLATION_COLUMNS = ("axis", "value", "residual_mae", "residual_mse", "w1", "mean_mse", "std_mse")


def cmd_ablate(cfg):
    case = cfg["case"]
    axis = cfg["ablation"].get("axis")
    values = cfg["ablation"].get("values")
    if isinstance(values, str):
        values = values.split(",")
    values = [_parse_value(v) for v in (values or [])]
    _validate_axis(case, axis, values)
    out = out_dir(cfg)
    ds_path = Path(cfg["paths"]["dataset"]) if cfg["paths"].get("dataset") else out / "dataset.pbfm"
    if not ds_path.exists():
        ds_path = cmd_gen_data(cfg)
    tcfg, scfg = train_config(cfg), sampler_config(cfg)
    n_eval = int(cfg["ablation"].get("n_eval", 1024))
    workers = min(max_workers(), len(values))
    sampler_only = axis in ("sampler", "steps")
    if workers > 1 and not sampler_only:
        jobs = [(case, str(ds_path), axis, v, tcfg, scfg, n_eval, cfg["net"], str(out / f"{axis}_{i}"))
                for i, v in enumerate(values)]
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_ablate_one, jobs))
    else:
        ds = read_dataset(ds_path)
        rows = E.run_ablation(case, ds, axis, values, tcfg, scfg, n_eval, cfg["net"], log_dir=str(out))
    path = out / f"ablation_{axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow(["" if r[k] is None else r[k] for k in ABLATION_COLUMNS])
    log.info("wrote %s", path)
    return rows


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="pbfm", description="Physics-constrained flow matching experiments")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--case", choices=E.CASES)
    common.add_argument("--steps", type=int, help="sampling steps")
    common.add_argument("--sampler", choices=("det", "stoch"))
    common.add_argument("--tstar", type=float)
    common.add_argument("--unroll", type=int)
    common.add_argument("--mode", choices=("config", "weighted", "fm-only"))
    common.add_argument("--beta", type=float, help="residual weight in weighted mode")
    common.add_argument("--power", type=float)
    common.add_argument("--sigma-min", type=float)
    common.add_argument("--time-dist", choices=("uniform", "logitnormal", "logit-normal"))
    common.add_argument("--iterations", type=int)
    common.add_argument("--checkpoint-every", type=int)
    common.add_argument("-n", type=int, help="number of samples to generate")
    common.add_argument("--steps-sweep", type=int, nargs="+")
    common.add_argument("--data", help="dataset file")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--resume", help="checkpoint to resume training from")
    common.add_argument("--generated", help="generated dataset file")
    common.add_argument("--reference", help="reference dataset file")
    common.add_argument("--axis", choices=E.ABLATION_AXES)
    common.add_argument("--values", help="comma-separated ablation values")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg)
    except (NumericalError, FloatingPointError, D.CGError) as exc:
        print(f"pbfm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"pbfm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError, KeyError, MissingEmaError, yaml.YAMLError) as exc:
        print(f"pbfm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
