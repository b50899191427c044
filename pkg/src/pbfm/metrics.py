"""Evaluation metrics: residual statistics, empirical W1, conditional moments."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np


def residual_stats(R):
    """MAE and MSE of a residual batch plus min/max of per-sample MAE.

    ``R`` has the sample index on axis 0.
    """
    R = np.asarray(getattr(R, "data", R), dtype=np.float64)
    if R.ndim == 0 or R.shape[0] == 0:
        raise ValueError("residual_stats: empty batch")
    per_sample = np.abs(R).reshape(R.shape[0], -1).mean(axis=1)
    return {
        "mae": float(np.abs(R).mean()),
        "mse": float(np.mean(R * R)),
        "min": float(per_sample.min()),
        "max": float(per_sample.max()),
    }


def _match_sizes(a, b, rng):
    """Subsample the larger set along axis 0 (without replacement) to equal size."""
    if a.shape[0] == b.shape[0]:
        return a, b
    rng = np.random.default_rng(0) if rng is None else rng
    if a.shape[0] > b.shape[0]:
        return a[np.sort(rng.choice(a.shape[0], b.shape[0], replace=False))], b
    return a, b[np.sort(rng.choice(b.shape[0], a.shape[0], replace=False))]


def wasserstein1(a, b, rng=None):
    """Empirical 1-D W1: mean absolute difference of the sorted samples."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1: empty input")
    a, b = _match_sizes(a, b, rng)
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def _samples(x):
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def per_pixel_w1(gen, ref, rng=None):
    """W1 at every pixel across the sample axis, averaged over pixels per channel.

    Accepts datasets or arrays shaped (n, C, H, W) or (n, D); for vector
    data each entry counts as its own channel.
    """
    g, r = _samples(gen), _samples(ref)
    if g.shape[1:] != r.shape[1:]:
        raise ValueError(f"per_pixel_w1: shape mismatch {g.shape[1:]} vs {r.shape[1:]}")
    if g.shape[0] == 0 or r.shape[0] == 0:
        raise ValueError("per_pixel_w1: empty input")
    g, r = _match_sizes(g, r, rng)
    d = np.abs(np.sort(g, axis=0) - np.sort(r, axis=0))
    # samples last and contiguous so each pixel is averaged like a 1-D column
    d = np.ascontiguousarray(np.moveaxis(d, 0, -1)).reshape(d.shape[1], -1, d.shape[0])
    return d.mean(axis=-1).mean(axis=-1)


def _group(samples, cond):
    if cond is None:
        return {(): samples}
    keys = [tuple(np.round(c, 12)) for c in np.asarray(cond, dtype=np.float64)]
    groups = {}
    for k, s in zip(keys, samples):
        groups.setdefault(k, []).append(s)
    return {k: np.stack(v) for k, v in groups.items()}


def cond_mean_std_error(gen, gen_cond, ref, ref_cond):
    """Per-condition mean and std fields compared by MSE, averaged over conditions."""
    gg = _group(_samples(gen), gen_cond)
    rg = _group(_samples(ref), ref_cond)
    if set(gg) != set(rg):
        raise ValueError("cond_mean_std_error: condition keys of generated and reference data differ")
    mean_err, std_err = [], []
    for k in rg:
        a, b = gg[k], rg[k]
        if a.shape[0] < 2 or b.shape[0] < 2:
            raise ValueError(f"cond_mean_std_error: condition {k} has fewer than 2 samples")
        mean_err.append(np.mean((a.mean(axis=0) - b.mean(axis=0)) ** 2))
        std_err.append(np.mean((a.std(axis=0, ddof=1) - b.std(axis=0, ddof=1)) ** 2))
    return {"mean_mse": float(np.mean(mean_err)), "std_mse": float(np.mean(std_err))}


def histogram(values, bins=64, value_range=None):
    """Rows (lo, hi, count, log_density) for distribution plots."""
    values = np.ravel(np.asarray(values, dtype=np.float64))
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    width = np.diff(edges)
    dens = counts / max(values.size, 1) / width
    with np.errstate(divide="ignore"):
        logd = np.where(counts > 0, np.log(np.where(dens > 0, dens, 1.0)), -np.inf)
    return [(float(lo), float(hi), int(c), float(ld)) for lo, hi, c, ld in zip(edges[:-1], edges[1:], counts, logd)]


def write_histogram_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "log_density"])
        w.writerows(rows)


def angular_histogram(xy, bins=16):
    """Counts of the polar angle of 2-D points over ``bins`` equal sectors."""
    xy = np.asarray(xy, dtype=np.float64)
    theta = np.mod(np.arctan2(xy[:, 1], xy[:, 0]), 2.0 * np.pi)
    return np.histogram(theta, bins=bins, range=(0.0, 2.0 * np.pi))[0]


@dataclass
class EvalReport:
    residual_mae: float
    residual_mse: float
    residual_min: float
    residual_max: float
    w1: list
    w1_mean: float
    mean_mse: float | None = None
    std_mse: float | None = None
    n_generated: int = 0
    n_reference: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.residual_mae, self.residual_mse, self.residual_min, self.residual_max, self.w1_mean, *self.w1]
        vals += [v for v in (self.mean_mse, self.std_mse) if v is not None]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("EvalReport: entries must be finite and non-negative")

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text
