import numpy as np
import jax.numpy as jnp
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from jcehb.beamforming import HybridBeamformers
from jcehb.channel import ChannelParams, SystemDims, make_sampler
from jcehb.errors import NonFiniteLoss
from jcehb.metrics import sum_rate
from jcehb.numerics import crandn, make_rng
from jcehb.training import (
    OnlineConfig, TrainConfig, channel_stream, directional_check, evaluate_hbdun, fd_gradient,
    grad, loss_sum_rate, online_schedule, read_trace_csv, save_checkpoint, sgd_step,
    stage1_loss, train_stage1, train_stage2, transfer_finetune, write_trace_csv,
)
from jcehb.unfolding import init_cedun, init_hbdun, load_params

D = SystemDims.desk()
SAMPLER = make_sampler(D, ChannelParams())
SMALL = TrainConfig(batch_size=4, steps_stage1=3, steps_stage2=3, seed=5)


def scalar_bf(f, w=1.0):
    return HybridBeamformers(np.ones((1, 1, 1)), np.ones((1, 1, 1)),
                             np.array([[[f]]], complex), np.array([[[w]]], complex))


def test_loss_sum_rate_cases():
    assert loss_sum_rate(scalar_bf(0.0), np.ones((1, 1, 1)), [1.0]) == 0
    # |h f w|^2 = 1 over noise 1 gives Gamma = 1
    assert_allclose(loss_sum_rate(scalar_bf(1.0), np.ones((1, 1, 1)), [1.0]), -1.0)


def test_loss_matches_metrics():
    hb = init_hbdun(D, 5, make_rng(0))
    from jcehb.unfolding import hbdun_forward
    H = SAMPLER(make_rng(1), 6)
    bf, Heq = hbdun_forward(hb, H, D.sigma2)
    want = -np.mean(sum_rate(bf, Heq, D).total)
    assert_allclose(float(loss_sum_rate(bf, Heq, D.sigma2)), want, rtol=1e-14)


def test_grad_simple_functionals():
    p = {"a": jnp.asarray([1.0 + 2j, -0.5j]), "b": jnp.asarray([3.0])}
    v, g = grad(lambda q: jnp.sum(jnp.abs(q["a"]) ** 2) + jnp.sum(q["b"] ** 2), p)
    assert_allclose(g["a"], 2 * np.asarray(p["a"]))
    assert_allclose(g["b"], [6.0])
    _, g = grad(lambda q: jnp.sum(jnp.abs(q["a"]) ** 2), p)
    assert_array_equal(g["b"], 0)
    with pytest.raises(NonFiniteLoss):
        grad(lambda q: jnp.log(q["b"][0] - 3.0), p)


def test_grad_matches_fd_on_small_block():
    hb = init_hbdun(D, 2, make_rng(2))
    H = jnp.asarray(SAMPLER(make_rng(3), 3))
    s2 = jnp.asarray(D.sigma2)
    _, g = grad(stage1_loss, hb, H, s2)
    fd = fd_gradient(stage1_loss, hb, H, s2, blocks=["Psi_W", "q_t"])
    for k in fd:
        assert np.linalg.norm(fd[k] - g[k]) <= 1e-4 * max(np.linalg.norm(g[k]), 1e-8)


def test_directional_check_agrees():
    hb = init_hbdun(D, 2, make_rng(4))
    H = jnp.asarray(SAMPLER(make_rng(5), 3))
    s2 = jnp.asarray(D.sigma2)
    _, g = grad(stage1_loss, hb, H, s2)
    r = make_rng(6)
    direction = {k: (r.normal(size=np.shape(v)) if np.isrealobj(v) else crandn(r, np.shape(v)))
                 for k, v in hb.items()}
    fd, ad = directional_check(stage1_loss, hb, g, direction, H, s2)
    assert abs(fd - ad) <= 1e-5 * max(1.0, abs(ad))


def test_sgd_step():
    p = {"x": np.array([1.0]), "y": np.array([2.0 + 1j])}
    g = {"x": np.array([2.0]), "y": np.array([1.0])}
    assert_allclose(sgd_step(p, g, 0.1)["x"], [0.8])
    assert_array_equal(sgd_step(p, g, 0.0)["y"], p["y"])
    assert_array_equal(sgd_step(p, {k: 0 * v for k, v in g.items()}, 0.3)["x"], p["x"])
    assert_array_equal(sgd_step(p, g, 0.1, frozen=("x",))["x"], p["x"])
    assert_allclose(sgd_step(p, g, {"x": 1.0, "y": 0.5})["y"], [1.5 + 1j])


def test_sgd_linear_in_eta():
    r = make_rng(0)
    p = {"a": crandn(r, (3, 2))}
    g = {"a": crandn(r, (3, 2))}
    assert_allclose(sgd_step(p, g, 0.3)["a"], sgd_step(sgd_step(p, g, 0.1), g, 0.2)["a"], atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(eta=0.1).lr2 == 0.1


def test_stage1_zero_steps_and_determinism():
    hb = init_hbdun(D, 5, make_rng(0))
    r0 = train_stage1(SMALL, SAMPLER, hb, D, steps=0)
    assert r0.params is hb and r0.trace == []
    a = train_stage1(SMALL, SAMPLER, hb, D)
    b = train_stage1(SMALL, SAMPLER, hb, D)
    for k in a.params:
        assert_array_equal(a.params[k], b.params[k])
    assert all(np.isfinite(row[2]) for row in a.trace)


def test_stage1_resume_continues_trajectory():
    hb = init_hbdun(D, 5, make_rng(0))
    full = train_stage1(SMALL, SAMPLER, hb, D, steps=4)
    half = train_stage1(SMALL, SAMPLER, hb, D, steps=2)
    rest = train_stage1(SMALL, SAMPLER, half.params, D, steps=2, start_step=2)
    for k in hb:
        assert_allclose(rest.params[k], full.params[k], atol=1e-13)
    assert [row[0] for row in rest.trace] == [2, 3]


def test_stage1_improves():
    cfg = TrainConfig(batch_size=8, seed=1)
    hb = init_hbdun(D, 5, make_rng(1))
    H = SAMPLER(make_rng(99), 100)
    before = evaluate_hbdun(hb, H, D, cfg).mean()
    after = evaluate_hbdun(train_stage1(cfg, SAMPLER, hb, D, steps=200).params, H, D, cfg).mean()
    assert after > before


def test_stage2_freezes_phases():
    r = make_rng(0)
    hb = init_hbdun(D, 5, r)
    ce = init_cedun(D, 16, r)
    out = train_stage2(SMALL, SAMPLER, hb, ce, D).params
    assert out["hbdun"]["Psi_F"] is hb["Psi_F"]
    assert out["hbdun"]["Psi_W"] is hb["Psi_W"]
    assert not np.array_equal(out["cedun"]["pilots"], ce["pilots"])
    zero = train_stage2(SMALL, SAMPLER, hb, ce, D, steps=0).params
    assert zero["cedun"] is ce


def test_online_without_longterm_keeps_phases():
    r = make_rng(0)
    params = {"cedun": init_cedun(D, 16, r), "hbdun": init_hbdun(D, 5, r)}
    on = OnlineConfig(n_frames=1, slots_per_frame=2, slot_batch=2, full_batch=2, longterm_steps=0)
    out, rates, trace = online_schedule(SMALL, on, channel_stream(SAMPLER, 0, on), params, D)
    assert_array_equal(out["hbdun"]["Psi_F"], params["hbdun"]["Psi_F"])
    assert len(rates) == 1 and len(trace) == 2
    on = OnlineConfig(n_frames=2, slots_per_frame=1, slot_batch=2, full_batch=2, longterm_steps=1)
    out, rates, _ = online_schedule(SMALL, on, channel_stream(SAMPLER, 0, on), params, D)
    assert not np.array_equal(out["hbdun"]["Psi_F"], params["hbdun"]["Psi_F"])
    assert len(rates) == 2


def test_transfer_unchanged_statistics():
    cfg = TrainConfig(batch_size=8, steps_stage1=100, steps_stage2=40, seed=2)
    r = make_rng(2)
    hb = train_stage1(cfg, SAMPLER, init_hbdun(D, 5, r), D).params
    params = {"cedun": init_cedun(D, 16, r), "hbdun": hb}
    H = SAMPLER(make_rng(50), 200)
    before = evaluate_hbdun(hb, H, D, cfg).mean()
    tuned = transfer_finetune(cfg, SAMPLER, params, D)
    after = evaluate_hbdun(tuned.params["hbdun"], H, D, cfg).mean()
    assert abs(after / before - 1) < 0.02
    assert {row[1] for row in tuned.trace} == {"finetune1", "finetune2"}


def test_trace_and_checkpoint_files(tmp_path):
    hb = init_hbdun(D, 5, make_rng(0))
    res = train_stage1(SMALL, SAMPLER, hb, D)
    p = tmp_path / "trace.csv"
    write_trace_csv(p, res.trace)
    assert read_trace_csv(p) == [(a, b, c, d) for a, b, c, d in res.trace]
    save_checkpoint(tmp_path / "ck.bin", {"hbdun": res.params}, SMALL, 3, "stage1")
    stores, meta = load_params(tmp_path / "ck.bin")
    assert meta["step"] == 3 and meta["layers"] == {"hbdun": 5}
    assert_array_equal(stores["hbdun"]["mu"], res.params["mu"])
