"""Differentiable physics residuals evaluated on predicted final states.

Every operator returns a residual field of shape ``(B, n_constraints, ...)``
so that one loss reduction serves all cases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

RESIDUAL_KINDS = ("circle", "darcy", "divergence", "algebraic-stall")


@dataclass(frozen=True)
class GasConstants:
    """Standard air: specific gas constant and Sutherland viscosity law."""

    R_gas: float = 287.05
    mu0: float = 1.716e-5
    T0: float = 273.15
    S: float = 110.4


def circle_residual(xy):
    """x^2 + y^2 - 1 for each 2-vector; input (..., 2), output (..., 1)."""
    xy = ad.as_tensor(xy)
    if xy.shape[-1] != 2:
        raise ad.ShapeError(f"circle_residual: last extent must be 2, got {xy.shape}")
    x = xy[..., 0:1]
    y = xy[..., 1:2]
    return x * x + y * y - 1.0


def darcy_forcing(n, r=10.0, w=0.125):
    """Source +r on the corner square [0, w]^2, sink -r on [1-w, 1]^2.

    Cells are selected by their centres on an ``n`` x ``n`` grid over the
    unit square, so both squares cover the same number of cells.
    """
    centres = (np.arange(n) + 0.5) / n
    lo = np.abs(centres - 0.5 * w) <= 0.5 * w
    hi = np.abs(centres - 1.0 + 0.5 * w) <= 0.5 * w
    f = np.zeros((n, n))
    f[np.ix_(lo, lo)] = r
    f[np.ix_(hi, hi)] = -r
    return f


def darcy_residual(K, p, f, h, check=True, zero_mean=True):
    """div(K grad p) + f on a cell-centred grid with zero-flux walls.

    ``K``, ``p`` have shape (..., H, W); ``f`` broadcasts against them. The
    pressure is shifted to zero mean first (the operator ignores constants,
    so this only fixes the gauge). With ``check`` set, non-positive
    permeability is rejected.
    """
    K, p = ad.as_tensor(K), ad.as_tensor(p)
    if K.shape != p.shape:
        raise ad.ShapeError(f"darcy_residual: K extents {K.shape} differ from p extents {p.shape}")
    if check and np.any(K.data <= 0.0):
        raise ValueError("darcy_residual: permeability must be strictly positive")
    if zero_mean:
        p = p - ad.mean(p, axis=(-2, -1), keepdims=True)
    return ad.darcy_flux_divergence(K, p, h) + np.asarray(f, dtype=np.float64)


def divergence_residual(U, h, scheme="spectral"):
    """du/dx + dv/dy of a periodic velocity field ``U`` of shape (..., 2, H, W).

    Channel 0 is the x-velocity (differentiated along the last axis), channel
    1 the y-velocity (second to last axis).
    """
    U = ad.as_tensor(U)
    if U.ndim < 3 or U.shape[-3] != 2:
        raise ad.ShapeError(f"divergence_residual: expected (..., 2, H, W), got {U.shape}")
    if scheme == "spectral":
        if U.shape[-1] % 2 or U.shape[-2] % 2:
            raise ad.ShapeError(f"divergence_residual: spectral scheme needs even grid extents, got {U.shape[-2:]}")
        d = ad.spectral_derivative
    elif scheme == "central":
        d = ad.central_derivative
    else:
        raise ValueError(f"unknown divergence scheme {scheme!r}")
    u = U[..., 0, :, :]
    v = U[..., 1, :, :]
    return d(u, -1, h) + d(v, -2, h)


def sutherland_viscosity(T, gas=GasConstants()):
    T = ad.as_tensor(T)
    return gas.mu0 * (gas.T0 + gas.S) / (T + gas.S) * ad.power(T * (1.0 / gas.T0), 1.5)


def stall_residuals(fields, gas=GasConstants(), check=True):
    """Ideal-gas and skin-friction residuals.

    ``fields`` has shape (..., 6, H, W) with channels
    (P, T, rho, tau_w, du/dx, du/dy); the result has shape (..., 2, H, W).
    """
    fields = ad.as_tensor(fields)
    if fields.ndim < 3 or fields.shape[-3] != 6:
        raise ad.ShapeError(f"stall_residuals: expected (..., 6, H, W), got {fields.shape}")
    P, T, rho, tau, dudx, dudy = (fields[..., i:i + 1, :, :] for i in range(6))
    if check and np.any(T.data <= 0.0):
        raise ValueError("stall_residuals: temperature must be strictly positive")
    r_ig = P - rho * T * gas.R_gas
    r_tau = tau - sutherland_viscosity(T, gas) * ad.sqrt(dudx * dudx + dudy * dudy)
    return ad.concat([r_ig, r_tau], axis=-3)


def residual_loss(R, t, p=1.0):
    """Sum over constraint channels of mean((t^p R)^2).

    ``R`` has shape (B, n_constraints, ...); ``t`` holds the per-sample
    starting times.
    """
    R = ad.as_tensor(R)
    if p < 0:
        raise ValueError("residual_loss: power must be >= 0")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    w = np.power(t, p) if p > 0 else np.ones_like(t)
    w = w.reshape((-1,) + (1,) * (R.ndim - 1))
    wr = R * w
    n_constraints = R.shape[1] if R.ndim > 1 else 1
    return ad.mean(wr * wr) * float(n_constraints)


@dataclass
class ResidualOperator:
    """Residual of a batch of physical fields, shape (B, n_constraints, ...).

    ``kind`` selects the constraint. Grid kinds use spacing ``h``; the Darcy
    kind expects channels (p, K), the divergence kind (u, v), the stall kind
    (P, T, rho, tau_w, du/dx, du/dy).
    """

    kind: str
    h: float = 1.0
    scheme: str = "spectral"
    gas: GasConstants = field(default_factory=GasConstants)
    check: bool = False
    forcing: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in RESIDUAL_KINDS:
            raise ValueError(f"unknown residual kind {self.kind!r}; expected one of {RESIDUAL_KINDS}")

    @property
    def n_constraints(self):
        return 2 if self.kind == "algebraic-stall" else 1

    def __call__(self, fields):
        fields = ad.as_tensor(fields)
        if self.kind == "circle":
            return circle_residual(fields)
        if self.kind == "darcy":
            n = fields.shape[-1]
            f = self.forcing if self.forcing is not None else darcy_forcing(n)
            r = darcy_residual(fields[:, 1], fields[:, 0], f, self.h, check=self.check)
            return ad.expand_dims(r, 1)
        if self.kind == "divergence":
            return ad.expand_dims(divergence_residual(fields, self.h, self.scheme), 1)
        return stall_residuals(fields, self.gas, check=self.check)
