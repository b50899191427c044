"""Backend selection for the stencil kernels.

The compiled extension is used when it imports; otherwise, or when
``PBFM_PURE_PYTHON=1`` is set, the numpy versions are used. Both expose
``im2col3x3``, ``col2im3x3``, ``darcy_apply`` and ``darcy_vjp``.
"""
import os

import numpy as np

from . import _kernels_py

PERIODIC = _kernels_py.PERIODIC
REPLICATE = _kernels_py.REPLICATE
PADDING_MODES = {"periodic": PERIODIC, "replicate": REPLICATE}

_compiled = None
if os.environ.get("PBFM_PURE_PYTHON", "0") != "1":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def padding_code(mode):
    try:
        return PADDING_MODES[mode]
    except KeyError:
        raise ValueError(f"unknown padding mode {mode!r}; expected one of {sorted(PADDING_MODES)}")


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'numpy' or None for the active one)."""
    if name is None:
        name = BACKEND
    if name == "numpy":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def im2col3x3(x, mode):
    return get_backend().im2col3x3(_c(x), mode)


def col2im3x3(cols, B, C, H, W, mode):
    return get_backend().col2im3x3(_c(cols), B, C, H, W, mode)


def darcy_apply(K, p, h):
    return get_backend().darcy_apply(_c(K), _c(p), float(h))


def darcy_vjp(K, p, g, h):
    return get_backend().darcy_vjp(_c(K), _c(p), _c(g), float(h))
