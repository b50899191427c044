"""Pure numpy versions of the hot stencil kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating point result up to summation order.
"""
import numpy as np

PERIODIC = 0
REPLICATE = 1


def _pad(x, mode):
    np_mode = "wrap" if mode == PERIODIC else "edge"
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode=np_mode)


def im2col3x3(x, mode):
    """Gather the 3x3 neighbourhood of every pixel.

    ``x`` has shape (B, C, H, W); the result has shape (C*9, B*H*W) with
    row ``c*9 + 3*dy + dx`` holding ``x[:, c]`` shifted by ``(dy-1, dx-1)``.
    The batch is folded into the columns so a convolution is one GEMM.
    """
    B, C, H, W = x.shape
    xp = _pad(x, mode).transpose(1, 0, 2, 3)
    cols = np.empty((C, 9, B, H, W))
    for dy in range(3):
        for dx in range(3):
            cols[:, 3 * dy + dx] = xp[:, :, dy:dy + H, dx:dx + W]
    return cols.reshape(C * 9, B * H * W)


def col2im3x3(cols, B, C, H, W, mode):
    """Adjoint of :func:`im2col3x3` (scatter-add back onto the grid)."""
    c5 = cols.reshape(C, 9, B, H, W)
    out = np.zeros((C, B, H + 2, W + 2))
    for dy in range(3):
        for dx in range(3):
            out[:, :, dy:dy + H, dx:dx + W] += c5[:, 3 * dy + dx]
    out = out.transpose(1, 0, 2, 3)
    if mode == PERIODIC:
        out[:, :, 1:-1, 1] += out[:, :, 1:-1, -1]
        out[:, :, 1:-1, -2] += out[:, :, 1:-1, 0]
        out[:, :, 1, 1:-1] += out[:, :, -1, 1:-1]
        out[:, :, -2, 1:-1] += out[:, :, 0, 1:-1]
        out[:, :, 1, 1] += out[:, :, -1, -1]
        out[:, :, 1, -2] += out[:, :, -1, 0]
        out[:, :, -2, 1] += out[:, :, 0, -1]
        out[:, :, -2, -2] += out[:, :, 0, 0]
    else:
        out[:, :, 1:-1, 1] += out[:, :, 1:-1, 0]
        out[:, :, 1:-1, -2] += out[:, :, 1:-1, -1]
        out[:, :, 1, 1:-1] += out[:, :, 0, 1:-1]
        out[:, :, -2, 1:-1] += out[:, :, -1, 1:-1]
        out[:, :, 1, 1] += out[:, :, 0, 0]
        out[:, :, 1, -2] += out[:, :, 0, -1]
        out[:, :, -2, 1] += out[:, :, -1, 0]
        out[:, :, -2, -2] += out[:, :, -1, -1]
    return np.ascontiguousarray(out[:, :, 1:-1, 1:-1])


def darcy_apply(K, p, h):
    """div(K grad p) on a cell-centred grid with zero-flux boundary faces.

    ``K`` and ``p`` have shape (B, H, W). Face coefficients are the
    arithmetic mean of the two adjacent cells.
    """
    inv_h2 = 1.0 / (h * h)
    out = np.zeros_like(p)
    fx = 0.5 * (K[:, :, 1:] + K[:, :, :-1]) * (p[:, :, 1:] - p[:, :, :-1]) * inv_h2
    out[:, :, :-1] += fx
    out[:, :, 1:] -= fx
    fy = 0.5 * (K[:, 1:, :] + K[:, :-1, :]) * (p[:, 1:, :] - p[:, :-1, :]) * inv_h2
    out[:, :-1, :] += fy
    out[:, 1:, :] -= fy
    return out


def darcy_vjp(K, p, g, h):
    """Pull back ``g`` through :func:`darcy_apply`; returns (dK, dp)."""
    inv_h2 = 1.0 / (h * h)
    gK = np.zeros_like(K)
    gp = np.zeros_like(p)
    dg = g[:, :, :-1] - g[:, :, 1:]
    kf = 0.5 * (K[:, :, 1:] + K[:, :, :-1]) * inv_h2
    s = dg * kf
    gp[:, :, 1:] += s
    gp[:, :, :-1] -= s
    s = 0.5 * dg * (p[:, :, 1:] - p[:, :, :-1]) * inv_h2
    gK[:, :, 1:] += s
    gK[:, :, :-1] += s
    dg = g[:, :-1, :] - g[:, 1:, :]
    kf = 0.5 * (K[:, 1:, :] + K[:, :-1, :]) * inv_h2
    s = dg * kf
    gp[:, 1:, :] += s
    gp[:, :-1, :] -= s
    s = 0.5 * dg * (p[:, 1:, :] - p[:, :-1, :]) * inv_h2
    gK[:, 1:, :] += s
    gK[:, :-1, :] += s
    return gK, gp
