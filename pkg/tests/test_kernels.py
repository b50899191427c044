import numpy as np
import pytest

from pbfm import _kernels_py as ref
from pbfm import kernels

compiled = pytest.importorskip("pbfm._ckernels")


@pytest.mark.parametrize("mode", [ref.PERIODIC, ref.REPLICATE])
def test_backends_agree(mode, rng):
    x = rng.standard_normal((3, 2, 7, 5))
    cols = rng.standard_normal((18, 3 * 35))
    np.testing.assert_array_equal(compiled.im2col3x3(x, mode), ref.im2col3x3(x, mode))
    np.testing.assert_allclose(compiled.col2im3x3(cols, 3, 2, 7, 5, mode), ref.col2im3x3(cols, 3, 2, 7, 5, mode),
                               rtol=0, atol=1e-13)
    K = np.exp(rng.standard_normal((2, 6, 7)))
    p = rng.standard_normal((2, 6, 7))
    g = rng.standard_normal((2, 6, 7))
    np.testing.assert_allclose(compiled.darcy_apply(K, p, 0.1), ref.darcy_apply(K, p, 0.1), rtol=1e-13, atol=1e-10)
    for a, b in zip(compiled.darcy_vjp(K, p, g, 0.1), ref.darcy_vjp(K, p, g, 0.1)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-10)


@pytest.mark.parametrize("backend", ["numpy", "cython"])
@pytest.mark.parametrize("mode", [ref.PERIODIC, ref.REPLICATE])
def test_col2im_is_adjoint_of_im2col(backend, mode, rng):
    be = kernels.get_backend(backend)
    x = rng.standard_normal((2, 3, 4, 6))
    c = rng.standard_normal((27, 48))
    lhs = np.sum(be.im2col3x3(x, mode) * c)
    rhs = np.sum(x * be.col2im3x3(c, 2, 3, 4, 6, mode))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_im2col_rows_are_shifted_copies(rng):
    x = rng.standard_normal((1, 1, 4, 5))
    cols = ref.im2col3x3(x, ref.PERIODIC).reshape(9, 4, 5)
    for dy in range(3):
        for dx in range(3):
            expect = np.roll(x[0, 0], (1 - dy, 1 - dx), axis=(0, 1))
            np.testing.assert_array_equal(cols[3 * dy + dx], expect)


@pytest.mark.parametrize("backend", ["numpy", "cython"])
def test_darcy_vjp_is_transpose_of_linearisation(backend, rng):
    be = kernels.get_backend(backend)
    K = np.exp(rng.standard_normal((1, 5, 5)))
    p = rng.standard_normal((1, 5, 5))
    g = rng.standard_normal((1, 5, 5))
    dp = rng.standard_normal((1, 5, 5))
    gK, gp = be.darcy_vjp(K, p, g, 0.2)
    # operator is linear in p: <g, A dp> = <A^T g, dp>
    assert np.sum(g * be.darcy_apply(K, dp, 0.2)) == pytest.approx(np.sum(gp * dp), rel=1e-12)
    # and linear in K for fixed p
    dK = rng.standard_normal((1, 5, 5))
    assert np.sum(g * be.darcy_apply(dK, p, 0.2)) == pytest.approx(np.sum(gK * dK), rel=1e-12)


def test_unknown_backend_and_padding():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
    with pytest.raises(ValueError):
        kernels.padding_code("reflect")
