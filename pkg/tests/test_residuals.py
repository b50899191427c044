import numpy as np
import pytest

from pbfm import autodiff as ad
from pbfm.residuals import (GasConstants, ResidualOperator, circle_residual, darcy_forcing, darcy_residual,
                            divergence_residual, residual_loss, stall_residuals, sutherland_viscosity)

from fdcheck import numeric_grad, rel_error


def assembled_darcy_matrix(K, h):
    """Dense matrix of div(K grad .) built cell by cell from face fluxes."""
    H, W = K.shape
    n = H * W
    A = np.zeros((n, n))
    for i in range(H):
        for j in range(W):
            row = i * W + j
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < H and 0 <= nj < W:
                    kf = 0.5 * (K[i, j] + K[ni, nj]) / h ** 2
                    A[row, ni * W + nj] += kf
                    A[row, row] -= kf
    return A


def convergence_errors(Ns):
    errs = []
    for N in Ns:
        h = 1.0 / N
        c = (np.arange(N) + 0.5) * h
        p = np.outer(np.cos(np.pi * c), np.cos(np.pi * c))
        R = darcy_residual(np.ones((N, N)), p, 0.0, h).data
        errs.append(np.abs(R + 2 * np.pi ** 2 * p).max())
    return np.array(errs)


def test_circle_examples():
    pts = np.array([[1.0, 0.0], [0.6, 0.8], [2.0, 0.0]])
    np.testing.assert_allclose(circle_residual(pts).data[:, 0], [0.0, 0.0, 3.0], atol=1e-15)
    with pytest.raises(ad.ShapeError):
        circle_residual(np.zeros((2, 3)))


def test_darcy_matches_assembled_matrix_unit_k():
    N, h = 8, 1.0 / 8
    p = np.random.default_rng(0).standard_normal((N, N))
    p -= p.mean()
    R = darcy_residual(np.ones((N, N)), p, 0.0, h).data
    A = assembled_darcy_matrix(np.ones((N, N)), h)
    np.testing.assert_allclose(R.ravel(), A @ p.ravel(), atol=1e-10)
    # K = 1 gives the plain 5-point Laplacian with mirrored walls
    pp = np.pad(p, 1, mode="edge")
    lap = (pp[2:, 1:-1] + pp[:-2, 1:-1] + pp[1:-1, 2:] + pp[1:-1, :-2] - 4 * p) / h ** 2
    np.testing.assert_allclose(R, lap, atol=1e-10)


def test_darcy_matches_assembled_matrix_variable_k(rng):
    N, h = 6, 0.2
    K = np.exp(rng.standard_normal((N, N)))
    p = rng.standard_normal((N, N))
    p -= p.mean()
    f = rng.standard_normal((N, N))
    R = darcy_residual(K, p, f, h).data
    np.testing.assert_allclose(R.ravel(), assembled_darcy_matrix(K, h) @ p.ravel() + f.ravel(), atol=1e-10)


def test_darcy_constant_pressure_gives_forcing():
    f = darcy_forcing(16)
    R = darcy_residual(np.ones((16, 16)), np.full((16, 16), 3.0), f, 1 / 16).data
    np.testing.assert_allclose(R, f, atol=1e-12)


def test_darcy_second_order_convergence():
    errs = convergence_errors([16, 32, 64])
    orders = np.log2(errs[:-1] / errs[1:])
    assert np.all((orders >= 1.8) & (orders <= 2.2)), orders
    assert errs[-1] < 5 * np.pi ** 2 / 64 ** 2


def test_darcy_rejects_nonpositive_permeability():
    with pytest.raises(ValueError):
        darcy_residual(np.zeros((4, 4)), np.zeros((4, 4)), 0.0, 0.25)
    with pytest.raises(ad.ShapeError):
        darcy_residual(np.ones((4, 4)), np.zeros((4, 5)), 0.0, 0.25)


def test_darcy_forcing_balance():
    for n in (16, 32, 64):
        f = darcy_forcing(n)
        assert abs(f.sum() / n ** 2) < 1e-12
        assert f.max() == 10.0 and f.min() == -10.0
        assert f[0, 0] == 10.0 and f[-1, -1] == -10.0
        assert np.count_nonzero(f == 10.0) == (n // 8) ** 2


def test_divergence_examples():
    N = 32
    h = 1.0 / N
    x = np.arange(N) * h
    U = np.zeros((1, 2, N, N))
    U[0, 0] = np.sin(2 * np.pi * x)[None, :]
    exact = 2 * np.pi * np.cos(2 * np.pi * x)[None, :]
    np.testing.assert_allclose(divergence_residual(U, h, "spectral").data[0], np.broadcast_to(exact, (N, N)), atol=1e-12)
    central = divergence_residual(U, h, "central").data[0]
    err = np.abs(central - exact).max()
    assert err < (2 * np.pi) ** 3 * h ** 2
    const = np.ones((2, 2, 8, 8)) * np.array([1.5, -2.0])[None, :, None, None]
    assert np.abs(divergence_residual(const, 0.125).data).max() < 1e-12
    with pytest.raises(ad.ShapeError):
        divergence_residual(np.zeros((1, 2, 7, 7)), 0.1, "spectral")
    with pytest.raises(ad.ShapeError):
        divergence_residual(np.zeros((1, 3, 8, 8)), 0.1)


def test_stall_examples():
    gas = GasConstants()
    f = np.zeros((6, 1, 1))
    f[:, 0, 0] = [1.2 * 287.05 * 300, 300.0, 1.2, sutherland_viscosity(300.0).item() * 5.0, 3.0, 4.0]
    R = stall_residuals(f).data
    assert abs(R[0, 0, 0]) < 1e-10 * f[0, 0, 0]
    assert abs(R[1, 0, 0]) < 1e-15
    f[:, 0, 0] = [101325.0, 288.15, 1.2, 0.0, 0.0, 0.0]
    assert stall_residuals(f).data[0, 0, 0] == pytest.approx(101325 - 1.2 * 287.05 * 288.15, abs=1e-8)
    assert stall_residuals(f).data[0, 0, 0] == pytest.approx(2068.8, abs=0.1)
    assert sutherland_viscosity(gas.T0).item() == pytest.approx(gas.mu0, rel=1e-15)
    f[:, 0, 0] = [0.0, gas.T0, 0.0, gas.mu0, 1.0, 0.0]
    assert abs(stall_residuals(f).data[1, 0, 0]) < 1e-20
    f[1] = -1.0
    with pytest.raises(ValueError):
        stall_residuals(f)


def test_residual_loss_examples():
    R = np.full((3, 1, 2), 2.0)
    assert residual_loss(R, np.zeros(3), 1.0).item() == 0.0
    assert residual_loss(R, np.full(3, 0.5), 1.0).item() == pytest.approx(1.0)
    assert residual_loss(R, np.full(3, 0.3), 0.0).item() == pytest.approx(4.0)
    # channels are summed, elements averaged
    R2 = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 3.0)])[None]
    assert residual_loss(R2, np.ones(1), 1.0).item() == pytest.approx(10.0)


@pytest.mark.parametrize("kind", ["circle", "darcy", "divergence", "algebraic-stall"])
def test_residual_operator_gradients_and_purity(kind, rng):
    if kind == "circle":
        x = rng.standard_normal((4, 2))
        op = ResidualOperator(kind)
    elif kind == "darcy":
        x = rng.standard_normal((2, 2, 6, 6))
        x[:, 1] = np.exp(x[:, 1])
        op = ResidualOperator(kind, h=1 / 6)
    elif kind == "divergence":
        x = rng.standard_normal((2, 2, 6, 6))
        op = ResidualOperator(kind, h=1 / 6)
    else:
        x = np.abs(rng.standard_normal((2, 6, 3, 3))) + 1.0
        x[:, 1] *= 300.0
        op = ResidualOperator(kind)
    before = x.copy()
    w = rng.standard_normal(op(x).shape)
    xt = ad.Tensor(x, requires_grad=True)
    (g,) = ad.grad(ad.sum(op(xt) * w), [xt])
    num = numeric_grad(lambda v: float(np.sum(w * op(v).data)), x, eps=1e-6 * max(1.0, np.abs(x).max()))
    assert rel_error(g, num) < 1e-6
    np.testing.assert_array_equal(x, before)
    assert op(x).shape[:2] == (x.shape[0], op.n_constraints)


def test_unknown_kind():
    with pytest.raises(ValueError):
        ResidualOperator("navier-stokes")
