import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pbfm import autodiff as ad
from pbfm.flow import FlowConfig, fm_loss, interpolate, make_flow_sample, sample_time, target_velocity


def test_interpolate_examples():
    x0, x1 = np.array([1.0, -2.0]), np.array([2.0, 5.0])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_allclose(interpolate(x0, x1, 1.0, 0.25), 0.25 * x0 + x1)
    assert interpolate(np.array(1.0), np.array(2.0), 0.5, 1e-3) == pytest.approx(1.5005, abs=1e-15)
    with pytest.raises(ad.ShapeError):
        interpolate(np.zeros(2), np.zeros(3), 0.5)


def test_target_velocity_examples():
    assert target_velocity(interpolate(1.0, 2.0, 0.3), 2.0, 0.3) == pytest.approx(1.0)
    assert target_velocity(np.array(0.0), np.array(3.0), 0.5, 1e-3) == pytest.approx(3 / 0.5005, rel=1e-12)
    assert target_velocity(np.array(4.0), np.array(4.0), 0.0) == 0.0
    with pytest.raises(ValueError):
        target_velocity(np.zeros(2), np.ones(2), 1.0, 0.0)
    # sigma_min > 0 makes t = 1 legal
    assert np.isfinite(target_velocity(np.zeros(2), np.ones(2), 1.0, 1e-3)).all()


@given(st.floats(0.0, 0.999), st.integers(0, 2**31 - 1))
def test_straight_path_velocity_is_constant(t, seed):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal(5), rng.standard_normal(5)
    u = target_velocity(interpolate(x0, x1, t), x1, t)
    np.testing.assert_allclose(u, x1 - x0, rtol=1e-9, atol=1e-9)


def test_per_sample_times_broadcast():
    x0 = np.zeros((3, 2, 2))
    x1 = np.ones((3, 2, 2))
    t = np.array([0.0, 0.5, 1.0])
    xt = interpolate(x0, x1, t)
    np.testing.assert_array_equal(xt[:, 0, 0], t)


def test_sample_time_distributions():
    rng = np.random.default_rng(0)
    u = sample_time(100_000, "uniform", rng)
    assert 0.49 <= u.mean() <= 0.51
    ln = sample_time(100_000, "logit-normal", rng)
    assert 0.48 <= np.median(ln) <= 0.52
    assert np.all((ln > 0) & (ln < 1))
    inside = np.mean((ln >= 0.25) & (ln <= 0.75))
    assert inside > 0.5
    a = sample_time(10, "logitnormal", np.random.default_rng(3))
    b = sample_time(10, "logit-normal", np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_time(4, "beta", rng)


def test_fm_loss_examples(rng):
    u = rng.standard_normal((4, 3))
    assert fm_loss(u, u).item() == 0.0
    assert fm_loss(u + 1.0, u).item() == pytest.approx(1.0)
    v = rng.standard_normal((4, 3))
    total = 0.0
    for a, b in zip(u.ravel(), v.ravel()):
        total += (a - b) ** 2
    assert fm_loss(u, v).item() == pytest.approx(total / u.size, rel=1e-14)
    with pytest.raises(ad.ShapeError):
        fm_loss(u, v[:, :2])


def test_flow_sample_invariants(rng):
    x1 = rng.standard_normal((6, 2))
    fs = make_flow_sample(x1, rng, FlowConfig(sigma_min=1e-3))
    np.testing.assert_allclose(fs.x_t, interpolate(fs.x0, fs.x1, fs.t, 1e-3))
    np.testing.assert_allclose(fs.u_target, target_velocity(fs.x_t, fs.x1, fs.t, 1e-3))
    with pytest.raises(ValueError):
        FlowConfig(sigma_min=1.0)
