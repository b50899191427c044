import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pbfm import autodiff as ad
from pbfm.combiner import GradientPair, combine
from pbfm.fileio import read_checkpoint, write_checkpoint
from pbfm.flow import FlowConfig, fm_loss, make_flow_sample
from pbfm.models import NetConfig, VelocityNet, flatten
from pbfm.residuals import ResidualOperator, residual_loss
from pbfm.trainer import (LOG_COLUMNS, NumericalError, OptimizerState, TrainConfig, Trainer, TrainState, curriculum,
                          optimizer_step, restore_trainer, to_checkpoint, train_step, unroll_predict)

from fdcheck import numeric_grad, rel_error


def time_stub(x, t, c):
    """u(x, t) = t for a scalar state."""
    return ad.Tensor(np.asarray(t, dtype=np.float64).reshape(-1, 1))


def test_unroll_hand_computed_sums():
    x = np.array([[2.0]])
    assert unroll_predict(time_stub, x, 0.0, None, 2)[0].data[0, 0] == 2.25
    assert unroll_predict(time_stub, x, 0.0, None, 4)[0].data[0, 0] == 2.375


def test_unroll_single_step_reduction(rng):
    u = rng.standard_normal((3, 2))
    x = rng.standard_normal((3, 2))
    t = np.array([0.1, 0.5, 0.9])
    out, _ = unroll_predict(lambda *_: ad.Tensor(u), x, t, None, 1)
    np.testing.assert_array_equal(out.data, x + (1 - t)[:, None] * u)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_unroll_constant_velocity_is_n_independent(n):
    c = np.array([[0.7, -1.3]])
    x = np.array([[1.0, 2.0]])
    out, _ = unroll_predict(lambda *_: ad.Tensor(c), x, 0.3, None, n)
    np.testing.assert_allclose(out.data, x + 0.7 * c, rtol=0, atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 4, 7])
def test_unroll_exact_ot_field_reaches_target(n, rng):
    x1 = rng.standard_normal((4, 3))
    x0 = rng.standard_normal((4, 3))
    t = np.array([0.0, 0.2, 0.5, 0.8])
    xt = (1 - t)[:, None] * x0 + t[:, None] * x1

    def exact(x, tt, c):
        x = x.data if isinstance(x, ad.Tensor) else x
        return ad.Tensor((x1 - x) / (1 - np.asarray(tt))[:, None])

    out, _ = unroll_predict(exact, xt, t, None, n)
    np.testing.assert_allclose(out.data, x1, atol=1e-12)


def test_unroll_reuses_first_velocity_and_rejects_t_one():
    calls = []

    def counting(x, t, c):
        calls.append(np.array(t))
        return ad.Tensor(np.zeros((1, 1)))

    unroll_predict(counting, np.zeros((1, 1)), 0.2, None, 3, u_first=ad.Tensor(np.zeros((1, 1))))
    assert len(calls) == 2
    np.testing.assert_allclose([c[0] for c in calls], [0.2 + 0.8 / 3, 0.2 + 1.6 / 3])
    with pytest.raises(ValueError):
        unroll_predict(counting, np.zeros((1, 1)), 1.0, None, 2)
    with pytest.raises(ValueError):
        unroll_predict(counting, np.zeros((1, 1)), 0.5, None, 0)


def tiny_net(seed=0):
    cfg = NetConfig("mlp", (2,), width=6, depth=2, time_dim=4, time_base=5.0, time_ratio=5.0,
                    zero_init_output=False, seed=seed)
    return VelocityNet(cfg)


def test_unroll_chain_is_differentiable():
    net = tiny_net()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2))
    t = np.array([0.1, 0.4, 0.7])
    names = list(net.params)
    p0 = net.params["hidden.0.w"].data.copy()

    def loss_of(w):
        ps = dict(net.params)
        ps["hidden.0.w"] = ad.Tensor(w)
        out, _ = unroll_predict(lambda a, b, c: net(a, b, c, ps), x, t, None, 3)
        return float(np.sum(out.data ** 2))

    out, _ = unroll_predict(net, x, t, None, 3)
    (g,) = ad.grad(ad.sum(out * out), [net.params["hidden.0.w"]])
    assert rel_error(g, numeric_grad(loss_of, p0)) < 1e-6
    assert names == list(net.params)


def test_curriculum_examples():
    assert all(curriculum(i, 50, 1) == 1 for i in range(50))
    assert curriculum(10, 100, 4) == 1
    assert curriculum(90, 100, 4) == 4
    assert [curriculum(i, 8, 4) for i in range(8)] == [1, 1, 2, 2, 3, 3, 4, 4]
    assert curriculum(49, 100, 3, breakpoints=[0.5, 0.9]) == 1
    assert curriculum(50, 100, 3, breakpoints=[0.5, 0.9]) == 2
    assert curriculum(95, 100, 3, breakpoints=[0.5, 0.9]) == 3


@given(st.integers(1, 300), st.integers(1, 6))
def test_curriculum_is_monotone_and_bounded(total, n_max):
    seq = [curriculum(i, total, n_max) for i in range(total)]
    assert seq[0] == 1
    assert all(1 <= s <= n_max for s in seq)
    assert all(a <= b for a, b in zip(seq, seq[1:]))


def _scalar_params(value):
    return {"theta": ad.Tensor(np.array([value]), requires_grad=True)}


def test_optimizer_zero_gradient_keeps_params():
    params = _scalar_params(1.5)
    opt = OptimizerState.zeros_like(params)
    optimizer_step(params, np.zeros(1), opt, lr=0.1)
    assert params["theta"].data[0] == 1.5
    assert opt.step == 1


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
def test_optimizer_first_step_closed_form(g):
    params = _scalar_params(1.0)
    opt = OptimizerState.zeros_like(params)
    lr, eps = 0.01, 1e-8
    optimizer_step(params, np.array([g]), opt, lr=lr, eps=eps)
    # bias-corrected m = g and v = g^2 after one step
    assert params["theta"].data[0] == pytest.approx(1.0 - lr * g / (abs(g) + eps), rel=1e-14)


def test_optimizer_weight_decay_is_decoupled():
    params = _scalar_params(2.0)
    opt = OptimizerState.zeros_like(params)
    optimizer_step(params, np.zeros(1), opt, lr=0.1, weight_decay=0.5)
    assert params["theta"].data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_quadratic_scalar_update_sign():
    for theta in (-1.0, 0.5, 3.0):
        params = _scalar_params(theta)
        g = np.array([2 * (theta - 1)])
        pair = combine(GradientPair(g, g.copy()), "config")
        assert pair.status == "parallel"
        opt = OptimizerState.zeros_like(params)
        optimizer_step(params, pair.g_update, opt, lr=0.01)
        assert np.sign(params["theta"].data[0] - theta) == -np.sign(theta - 1)


def circle_data(n=64, seed=0):
    th = np.random.default_rng(seed).uniform(0, 2 * np.pi, n)
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def make_trainer(mode="config", seed=0, iterations=12, **kw):
    cfg = TrainConfig(iterations=iterations, batch_size=8, mode=mode, seed=seed, log_every=4, lr=1e-2, **kw)
    return Trainer(tiny_net(seed), cfg, circle_data(), residual_fn=ResidualOperator("circle"))


def params_of(tr):
    return flatten([p.data for p in tr.net.params.values()])


def test_fm_only_step_equals_plain_flow_matching():
    tr = make_trainer("fm-only")
    batch = tr.next_batch()
    net = tiny_net(0)
    loss = fm_loss(net(batch.x_t, batch.t), batch.u_target)
    g = flatten(ad.grad(loss, list(net.params.values())))
    opt = OptimizerState.zeros_like(net.params)
    optimizer_step(net.params, g, opt, tr.cfg.lr, tr.cfg.beta1, tr.cfg.beta2)
    m = train_step(tr.state, batch, 1, tr.cfg, tr.residual_fn)
    np.testing.assert_array_equal(params_of(tr), flatten([p.data for p in net.params.values()]))
    assert np.isnan(m["L_r"])


def test_disabled_residual_branch_matches_fm_only_bit_for_bit():
    a = make_trainer("fm-only")
    b = make_trainer("weighted", w_fm=1.0, w_r=0.0, unroll=2)
    a.run()
    b.run()
    np.testing.assert_array_equal(params_of(a), params_of(b))
    for k in a.state.ema.shadow:
        np.testing.assert_array_equal(a.state.ema.shadow[k], b.state.ema.shadow[k])


def test_zero_residual_falls_back_to_fm_gradient():
    tr = make_trainer("config")
    ref = make_trainer("fm-only")
    zero = lambda x: x * 0.0  # noqa: E731
    m = train_step(tr.state, tr.next_batch(), 1, tr.cfg, zero)
    train_step(ref.state, ref.next_batch(), 1, ref.cfg)
    assert m["status"] == "zero" and m["grad_norm_r"] == 0.0
    np.testing.assert_array_equal(params_of(tr), params_of(ref))


def test_config_update_decreases_both_losses_to_first_order():
    net = tiny_net(3)
    rng = np.random.default_rng(5)
    batch = make_flow_sample(circle_data(32) * 1.3, rng, FlowConfig())
    op = ResidualOperator("circle")
    names = list(net.params)

    def losses(ps):
        u = net(batch.x_t, batch.t, None, ps)
        x1, _ = unroll_predict(lambda a, b, c: net(a, b, c, ps), batch.x_t, batch.t, None, 2, u_first=u)
        return fm_loss(u, batch.u_target), residual_loss(op(x1), batch.t, 1.0)

    lf, lr_ = losses(net.params)
    plist = list(net.params.values())
    gf = flatten(ad.grad(lf, plist))
    gr = flatten(ad.grad(lr_, plist))
    pair = combine(GradientPair(gf, gr), "config")
    assert pair.status == "ok"
    eps = 1e-6 / np.linalg.norm(pair.g_update)
    shifted = {}
    i = 0
    for k in names:
        n = net.params[k].size
        shifted[k] = ad.Tensor(net.params[k].data - eps * pair.g_update[i:i + n].reshape(net.params[k].shape))
        i += n
    lf2, lr2 = losses(shifted)
    assert lf2.item() < lf.item()
    assert lr2.item() < lr_.item()


def test_nan_loss_aborts_naming_term():
    tr = make_trainer("config")
    bad = lambda x: x * np.nan  # noqa: E731
    with pytest.raises(NumericalError, match="L_r"):
        train_step(tr.state, tr.next_batch(), 1, tr.cfg, bad)
    tr2 = make_trainer("fm-only")
    batch = tr2.next_batch()
    batch.u_target[0, 0] = np.nan
    with pytest.raises(NumericalError, match="L_fm"):
        train_step(tr2.state, batch, 1, tr2.cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(unroll=0)
    with pytest.raises(ValueError):
        TrainConfig(power=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="pcgrad")
    with pytest.raises(ValueError):
        TrainConfig(unroll=3, curriculum=[0.5])


def test_training_is_reproducible_for_a_seed():
    a, b, c = make_trainer(seed=4), make_trainer(seed=4), make_trainer(seed=5)
    for tr in (a, b, c):
        tr.run()
    np.testing.assert_array_equal(params_of(a), params_of(b))
    assert not np.array_equal(params_of(a), params_of(c))


def test_log_csv_columns(tmp_path):
    tr = make_trainer("config", unroll=2)
    path = tmp_path / "log.csv"
    tr.run(log_path=path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 4
    body = np.array(rows[1:], dtype=float)
    assert np.all(body[:, 2] > 0) and np.all(body[:, 3] > 0) and np.all(body[:, 4] > 0)
    assert body[-1, 5] == 2


def test_resume_from_checkpoint_is_bit_identical(tmp_path):
    full = make_trainer("config", unroll=2, iterations=12)
    full.run()
    part = make_trainer("config", unroll=2, iterations=12)
    part.run(until=5)
    path = tmp_path / "ck.pbfm"
    write_checkpoint(path, to_checkpoint(part))
    resumed = restore_trainer(read_checkpoint(path), part.data, residual_fn=part.residual_fn)
    assert resumed.state.step == 5
    resumed.run()
    np.testing.assert_array_equal(params_of(full), params_of(resumed))
    for k in full.state.ema.shadow:
        np.testing.assert_array_equal(full.state.ema.shadow[k], resumed.state.ema.shadow[k])
    for m1, m2 in zip(full.state.opt.v, resumed.state.opt.v):
        np.testing.assert_array_equal(m1, m2)


def test_state_create_snapshots_ema():
    net = tiny_net()
    st_ = TrainState.create(net, TrainConfig())
    for k, v in net.params.items():
        np.testing.assert_array_equal(st_.ema.shadow[k], v.data)
        assert st_.ema.shadow[k] is not v.data
