"""Combination of the flow-matching and residual gradients.

``config_update`` is the two-gradient conflict-free rule: the update
direction bisects the two orthogonalised unit gradients, so it has the same
positive inner product with both unit gradients. ``weighted_update`` is the
fixed-weight baseline.

Gradients are flat vectors over all network parameters, concatenated in the
network's parameter order (see :func:`pbfm.models.flatten`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

UNIT_EPS = 1e-12
PARALLEL_TOL = 1e-8


@dataclass
class GradientPair:
    g_fm: np.ndarray
    g_r: np.ndarray
    g_update: np.ndarray | None = None
    status: str = ""

    def __post_init__(self):
        if self.g_fm.shape != self.g_r.shape:
            raise ValueError(f"gradient lengths differ: {self.g_fm.shape} vs {self.g_r.shape}")


def unit(g):
    """g / |g|, or the zero vector when |g| <= 1e-12."""
    g = np.asarray(g, dtype=np.float64)
    n = math.sqrt(g @ g)
    if n <= UNIT_EPS:
        return np.zeros_like(g)
    return g / n


def orthogonalize(g1, g2):
    """Component of ``g2`` orthogonal to ``g1``; ``g2`` itself when ``g1`` is zero.

    The projection is removed twice so near-parallel pairs stay orthogonal to
    working precision.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    n2 = g1 @ g1
    if n2 == 0.0:
        return g2.copy()
    o = g2 - (g1 @ g2 / n2) * g1
    return o - (g1 @ o / n2) * g1


def config_direction(g_fm, g_r):
    """Unit bisector of the two mutually orthogonalised gradients."""
    g_fm = np.asarray(g_fm, dtype=np.float64)
    g_r = np.asarray(g_r, dtype=np.float64)
    a = unit(orthogonalize(g_fm, g_r))
    b = unit(orthogonalize(g_r, g_fm))
    return unit(a + b)


def combine_config(g_fm, g_r):
    """Conflict-free update plus a status tag.

    Status is ``"ok"``, ``"zero"`` or ``"parallel"`` (both fall back to the
    plain sum) or ``"anti-parallel"`` (no common descent direction; zero
    update).
    """
    g_fm = np.asarray(g_fm, dtype=np.float64)
    g_r = np.asarray(g_r, dtype=np.float64)
    if g_fm.shape != g_r.shape:
        raise ValueError(f"config_update: gradient lengths differ: {g_fm.shape} vs {g_r.shape}")
    n_fm = math.sqrt(g_fm @ g_fm)
    n_r = math.sqrt(g_r @ g_r)
    if n_fm <= UNIT_EPS or n_r <= UNIT_EPS:
        return g_fm + g_r, "zero"
    cos = (g_fm @ g_r) / (n_fm * n_r)
    if cos > 1.0 - PARALLEL_TOL:
        return g_fm + g_r, "parallel"
    if cos < -1.0 + PARALLEL_TOL:
        return np.zeros_like(g_fm), "anti-parallel"
    g_v = config_direction(g_fm, g_r)
    return (g_fm @ g_v + g_r @ g_v) * g_v, "ok"


def config_update(g_fm, g_r):
    """g_update = (g_fm . g_v + g_r . g_v) g_v with the degenerate fallbacks."""
    g, status = combine_config(g_fm, g_r)
    if status == "anti-parallel":
        logger.warning("config_update: gradients are anti-parallel; returning a zero update")
    return g


def weighted_update(g_fm, g_r, w_fm=1.0, w_r=1.0):
    if w_fm < 0 or w_r < 0:
        raise ValueError("weighted_update: weights must be non-negative")
    return w_fm * np.asarray(g_fm, dtype=np.float64) + w_r * np.asarray(g_r, dtype=np.float64)


def combine(pair: GradientPair, mode="config", w_fm=1.0, w_r=1.0) -> GradientPair:
    """Fill ``pair.g_update`` according to ``mode`` (config, weighted, fm-only)."""
    if mode == "config":
        pair.g_update, pair.status = combine_config(pair.g_fm, pair.g_r)
    elif mode == "weighted":
        pair.g_update, pair.status = weighted_update(pair.g_fm, pair.g_r, w_fm, w_r), "ok"
    elif mode == "fm-only":
        pair.g_update, pair.status = pair.g_fm.copy(), "ok"
    else:
        raise ValueError(f"unknown update mode {mode!r}")
    return pair
