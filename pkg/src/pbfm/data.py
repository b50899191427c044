"""Synthetic datasets whose samples satisfy their governing residuals.

Grid generators derive one RNG stream per sample from ``(seed, index)``,
so a dataset does not depend on how its samples are scheduled.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .residuals import GasConstants, darcy_forcing, sutherland_viscosity

STALL_CHANNELS = ("P", "T", "rho", "tau_w", "dudx", "dudy")
# conditioning: Mach number, mean pitch angle (deg), pitch amplitude (deg), reduced frequency
STALL_COND_RANGES = ((0.3, 0.6), (5.0, 15.0), (5.0, 15.0), (0.025, 0.1))
REYNOLDS_RANGE = (100.0, 500.0)


class CGError(RuntimeError):
    """Conjugate gradient failed to converge."""


@dataclass
class GridDataset:
    """Samples of shape (count, C, H, W) or (count, D) plus metadata."""

    samples: np.ndarray
    channels: list
    cond: np.ndarray | None = None
    stats: dict | None = None
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("GridDataset: samples contain non-finite values")
        if len(self.channels) != self.samples.shape[1]:
            raise ValueError(f"GridDataset: {len(self.channels)} channel names for {self.samples.shape[1]} channels")
        if self.cond is not None:
            self.cond = np.asarray(self.cond, dtype=np.float64)
            if self.cond.ndim != 2 or self.cond.shape[0] != self.samples.shape[0]:
                raise ValueError(f"GridDataset: conditioning {self.cond.shape} does not match {self.samples.shape[0]} samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def cond_dim(self):
        return 0 if self.cond is None else self.cond.shape[1]

    def subset(self, idx):
        cond = None if self.cond is None else self.cond[idx]
        return GridDataset(self.samples[idx], list(self.channels), cond, self.stats, dict(self.spec))


@dataclass
class GrfSpec:
    corr_length: float = 0.15
    variance: float = 1.0
    spectrum: str = "squared-exponential"
    seed: int = 0

    def __post_init__(self):
        if self.corr_length <= 0:
            raise ValueError("GrfSpec: correlation length must be > 0")
        if self.variance < 0:
            raise ValueError("GrfSpec: variance must be >= 0")
        if self.spectrum != "squared-exponential":
            raise ValueError(f"GrfSpec: unsupported spectrum {self.spectrum!r}")


def sample_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _k2(N):
    k = 2.0 * np.pi * np.fft.fftfreq(N, d=1.0 / N)
    return k[:, None] ** 2 + k[None, :] ** 2


# ------------------------------------------------------------------- circle


def gen_circle(n, rng=0):
    """``n`` points (cos theta, sin theta) with theta uniform on [0, 2 pi)."""
    if n < 1:
        raise ValueError("gen_circle: n must be >= 1")
    theta = _as_rng(rng).uniform(0.0, 2.0 * np.pi, n)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    seed = rng if isinstance(rng, (int, np.integer)) else None
    return GridDataset(pts, ["x", "y"], spec={"generator": "circle", "n": n, "seed": seed})


# ---------------------------------------------------------------------- GRF


def gen_grf(spec: GrfSpec, N, rng=None):
    """Periodic Gaussian field on an N x N grid over the unit square.

    White noise is filtered by the square root of a squared-exponential
    spectrum; the spectrum is scaled so the pointwise variance equals
    ``spec.variance`` in expectation.
    """
    if N < 8:
        raise ValueError("gen_grf: N must be >= 8")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    s = np.exp(-0.5 * _k2(N) * spec.corr_length ** 2)
    s *= spec.variance * N * N / s.sum()
    noise = rng.standard_normal((N, N))
    return np.fft.ifft2(np.sqrt(s) * np.fft.fft2(noise)).real


# -------------------------------------------------------------------- Darcy


def solve_darcy(K, f, h, tol=1e-8, maxiter=None, labels=None):
    """Solve div(K grad p) + f = 0 for zero-mean p, batched over axis 0.

    Conjugate gradients on the positive semi-definite system -A p = f, with
    the residual projected onto zero-mean fields every iteration. Stops per
    sample once max|r| <= tol * max|f|.
    """
    K = np.asarray(K, dtype=np.float64)
    B, H, W = K.shape
    f = np.broadcast_to(np.asarray(f, dtype=np.float64), K.shape)
    maxiter = 10 * H * W if maxiter is None else maxiter

    def op(v):
        return -kernels.darcy_apply(K, v, h)

    def project(v):
        return v - v.mean(axis=(1, 2), keepdims=True)

    x = np.zeros_like(K)
    r = project(f.copy())
    d = r.copy()
    rr = np.einsum("bij,bij->b", r, r)
    target = tol * np.abs(f).max(axis=(1, 2))
    active = np.abs(r).max(axis=(1, 2)) > target
    it = 0
    while active.any() and it < maxiter:
        Ad = op(d)
        dAd = np.einsum("bij,bij->b", d, Ad)
        alpha = np.where(active, rr / np.where(dAd > 0, dAd, 1.0), 0.0)[:, None, None]
        x += alpha * d
        r = project(r - alpha * Ad)
        rr_new = np.einsum("bij,bij->b", r, r)
        beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)[:, None, None]
        d = np.where(active[:, None, None], r + beta * d, d)
        rr = rr_new
        active = np.abs(r).max(axis=(1, 2)) > target
        it += 1
    if active.any():
        bad = np.flatnonzero(active)
        names = [labels[i] for i in bad] if labels is not None else list(bad)
        raise CGError(f"CG did not converge in {maxiter} iterations for samples {names}")
    return project(x), it


def gen_darcy(n, N=32, spec: GrfSpec | None = None, cg_tol=1e-8, seed=0, forcing_r=10.0, forcing_w=0.125):
    """Pressure/permeability pairs with K = exp(G) and a CG pressure solve.

    Channels are (p, K). The stored samples satisfy the same discrete
    operator used by :func:`pbfm.residuals.darcy_residual`.
    """
    if cg_tol <= 0:
        raise ValueError("gen_darcy: cg_tol must be > 0")
    spec = spec or GrfSpec(seed=seed)
    h = 1.0 / N
    f = darcy_forcing(N, forcing_r, forcing_w)
    K = np.stack([np.exp(gen_grf(spec, N, sample_rng(seed, i))) for i in range(n)])
    labels = [f"seed={seed} index={i}" for i in range(n)]
    p, _ = solve_darcy(K, f, h, cg_tol, labels=labels)
    res = kernels.darcy_apply(K, p, h) + f
    bound = 10.0 * cg_tol * np.abs(f).max()
    worst = np.abs(res).max(axis=(1, 2))
    if np.any(worst > bound):
        i = int(np.argmax(worst))
        raise CGError(f"Darcy sample {labels[i]} residual {worst[i]:.3e} exceeds bound {bound:.3e}")
    meta = {"generator": "darcy", "n": n, "N": N, "seed": seed, "cg_tol": cg_tol,
            "grf": asdict(spec), "forcing_r": forcing_r, "forcing_w": forcing_w}
    return GridDataset(np.stack([p, K], axis=1), ["p", "K"], spec=meta)


# ------------------------------------------------------------ div-free flow


def decay_exponent(c):
    """Stream-function spectral decay; larger ``c`` gives shallower decay."""
    lo, hi = REYNOLDS_RANGE
    return 3.5 - (np.asarray(c, dtype=np.float64) - lo) / (hi - lo)


def gen_divfree(n, N=32, conditions=None, seed=0):
    """Periodic divergence-free velocity fields (u, v) from a stream function.

    ``conditions`` (length ``n``) holds c in [100, 500]; when omitted each
    sample draws its own c uniformly. Fields are scaled so the expected
    pointwise velocity variance is one.
    """
    if N % 2:
        raise ValueError("gen_divfree: N must be even")
    k = 2.0 * np.pi * np.fft.fftfreq(N, d=1.0 / N)
    k[N // 2] = 0.0
    ky, kx = k[:, None], k[None, :]
    kk = np.sqrt(_k2(N))
    nyq = np.zeros((N, N), dtype=bool)
    nyq[N // 2, :] = nyq[:, N // 2] = True
    out = np.empty((n, 2, N, N))
    cs = np.empty(n)
    for i in range(n):
        rng = sample_rng(seed, i)
        c = rng.uniform(*REYNOLDS_RANGE) if conditions is None else float(conditions[i])
        if not REYNOLDS_RANGE[0] <= c <= REYNOLDS_RANGE[1]:
            raise ValueError(f"gen_divfree: condition {c} outside {REYNOLDS_RANGE}")
        amp = np.zeros((N, N))
        mask = (kk > 0) & ~nyq
        amp[mask] = kk[mask] ** (-decay_exponent(c))
        # expected mean |U|^2 = sum |k|^2 amp^2 / N^2
        amp *= N / np.sqrt(np.sum(kk ** 2 * amp ** 2))
        psi_hat = amp * np.fft.fft2(rng.standard_normal((N, N)))
        out[i, 0] = np.fft.ifft2(1j * ky * psi_hat).real
        out[i, 1] = np.fft.ifft2(-1j * kx * psi_hat).real
        cs[i] = c
    meta = {"generator": "divfree", "n": n, "N": N, "seed": seed}
    return GridDataset(out, ["u", "v"], cs[:, None], spec=meta)


# ---------------------------------------------------------------- algebraic


def stall_fields(cond, N, rng, gas=GasConstants()):
    """One (6, N, N) sample for conditioning (Mach, alpha0, alpha_s, k)."""
    mach, a0, a_s, kred = cond
    grid = (np.arange(N) + 0.5) / N
    phase, s = np.meshgrid(grid, grid, indexing="ij")
    alpha = (a0 + a_s * np.sin(2.0 * np.pi * phase)) / 20.0
    wave = np.sin(2.0 * np.pi * (s + 10.0 * kred * phase))
    g = [gen_grf(GrfSpec(corr_length=0.2), N, rng) for _ in range(4)]
    T = 288.15 * (1.0 + 0.2 * mach ** 2) + 8.0 * alpha * (1.0 - s) + 2.0 * wave + 1.5 * g[0]
    rho = 1.225 * (1.0 - 0.3 * mach ** 2) + 0.05 * alpha * np.sin(np.pi * s) + 0.01 * g[1]
    dudx = 2.0e3 * mach * (1.0 + alpha * wave) + 150.0 * g[2]
    dudy = 4.0e4 * mach * (1.0 + 0.5 * alpha * np.exp(-3.0 * s)) + 1.5e3 * g[3]
    P = rho * gas.R_gas * T
    tau = sutherland_viscosity(T, gas).data * np.sqrt(dudx ** 2 + dudy ** 2)
    return np.stack([P, T, rho, tau, dudx, dudy])


def gen_algebraic(n_conditions, per_condition=1, N=16, seed=0, perturb=0.02, conditions=None):
    """Six-channel fields obeying the ideal-gas and Sutherland relations exactly.

    Each condition is drawn uniformly from ``STALL_COND_RANGES`` (or taken
    from ``conditions``); each of its ``per_condition`` samples uses a copy
    of the condition with multiplicative Gaussian noise of size ``perturb``.
    The stored conditioning is the unperturbed value.
    """
    cond_rng = np.random.default_rng([int(seed), 2**31 - 1])
    if conditions is None:
        lo = np.array([r[0] for r in STALL_COND_RANGES])
        hi = np.array([r[1] for r in STALL_COND_RANGES])
        conditions = cond_rng.uniform(lo, hi, size=(n_conditions, 4))
    conditions = np.asarray(conditions, dtype=np.float64)
    if conditions.shape != (n_conditions, 4):
        raise ValueError(f"gen_algebraic: conditions must have shape ({n_conditions}, 4)")
    out, cond = [], []
    for j in range(n_conditions):
        for m in range(per_condition):
            i = j * per_condition + m
            rng = sample_rng(seed, i)
            c = conditions[j] * (1.0 + perturb * rng.standard_normal(4))
            out.append(stall_fields(c, N, rng))
            cond.append(conditions[j])
    meta = {"generator": "algebraic", "n_conditions": n_conditions, "per_condition": per_condition,
            "N": N, "seed": seed, "perturb": perturb}
    return GridDataset(np.stack(out), list(STALL_CHANNELS), np.stack(cond), spec=meta)


# ------------------------------------------------------------ normalisation


def _channel_axes(x):
    return (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))


def _stat_shape(ndim, C):
    return (1, C) + (1,) * (ndim - 2)


def normalize(ds: GridDataset):
    """Per-channel standardisation; returns ``(normalized dataset, stats)``.

    Conditioning vectors, when present, are standardised per entry too.
    """
    x = ds.samples
    axes = _channel_axes(x)
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    if np.any(std <= 1e-12):
        bad = [ds.channels[i] for i in np.flatnonzero(std <= 1e-12)]
        raise ValueError(f"normalize: constant channel(s) {bad}")
    stats = {"mean": mean.tolist(), "std": std.tolist()}
    shp = _stat_shape(x.ndim, x.shape[1])
    xn = (x - mean.reshape(shp)) / std.reshape(shp)
    cond = None
    if ds.cond is not None:
        cm, cs = ds.cond.mean(axis=0), ds.cond.std(axis=0)
        cs = np.where(cs > 1e-12, cs, 1.0)
        stats["cond_mean"], stats["cond_std"] = cm.tolist(), cs.tolist()
        cond = (ds.cond - cm) / cs
    return GridDataset(xn, list(ds.channels), cond, stats, dict(ds.spec)), stats


def denormalize(x, stats):
    """Inverse of :func:`normalize` for samples; works on arrays and Tensors."""
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    shp = _stat_shape(x.ndim, mean.size)
    return x * std.reshape(shp) + mean.reshape(shp)


def normalize_samples(x, stats):
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    shp = _stat_shape(np.ndim(x), mean.size)
    return (x - mean.reshape(shp)) / std.reshape(shp)


def normalize_cond(c, stats):
    if c is None or "cond_mean" not in stats:
        return c
    return (np.asarray(c, dtype=np.float64) - np.asarray(stats["cond_mean"])) / np.asarray(stats["cond_std"])


def denormalize_cond(c, stats):
    if c is None or "cond_mean" not in stats:
        return c
    return np.asarray(c, dtype=np.float64) * np.asarray(stats["cond_std"]) + np.asarray(stats["cond_mean"])
