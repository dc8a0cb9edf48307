"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
through the ``criterion`` fixture (printed again in the terminal summary).

The long-running criteria (8, 9, 12) train networks from scratch; the whole
module takes on the order of 20 minutes on one CPU.
"""

import hashlib
import time

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from jcehb import cli
from jcehb.beamforming import (
    analog_for_users, initial_precoder, mmse_combiner, quantize_phases, sca_digital, stream_mse,
)
from jcehb.channel import ChannelParams, SystemDims, make_sampler, sample_channel
from jcehb.estimation import random_pilots, rls_estimate
from jcehb.metrics import OverheadInputs, overhead_table, pilot_overhead, stream_rates
from jcehb.numerics import crandn, hermitian, make_rng, substream
from jcehb.training import (
    CEDUN_INNER_BLOCKS, OnlineConfig, TrainConfig, channel_stream, directional_check,
    evaluate_hbdun, evaluate_joint, grad, online_schedule, pipeline_beamformers, stage1_loss,
    stage2_loss, train_cedun_nmse, train_stage1, train_stage2,
)
from jcehb.unfolding import (
    blackbox_forward, cedun_estimate, emulated_t_update, emulation_mu, hbdun_digital,
    hbdun_forward, init_blackbox, init_cedun, init_digital, init_hbdun, scale_pilots,
    sca_t_update, split_analog,
)
from jcehb.unfolding.params import to_jax

D = SystemDims.desk()
S2 = D.sigma2_array
SAMPLER = make_sampler(D, ChannelParams())


def desk_equivalent(rng, batch):
    """Desk channels seen through random analog phases."""
    H = sample_channel(D, ChannelParams(), rng, batch=batch).H
    F_RF, W_RF = analog_for_users(rng.uniform(-np.pi, np.pi, (D.Nt, D.Nt_rf)),
                                  rng.uniform(-np.pi, np.pi, (D.K, D.Nr, D.Nr_rf)), D.K)
    return H, F_RF, W_RF, hermitian(W_RF) @ H @ F_RF


def sum_rates(F_BB, W_BB, H_eq, W_RF):
    return np.asarray(stream_rates(F_BB, W_BB, H_eq, W_RF, S2)).sum(axis=(-2, -1))


# -- 1 ---------------------------------------------------------------------------

def test_c01_rls_matches_ls(criterion):
    L = 16
    data = [desk_equivalent(make_rng(seed), None)[3] for seed in range(100)]
    X = np.stack([random_pilots(make_rng(10**6 + s), D.Nt_rf, L, D.P, lead=(D.K,)) for s in range(100)])
    H_eq = np.stack(data)
    Y = H_eq @ X
    t0 = time.perf_counter()
    H_hat = rls_estimate(X, Y, beta=0.999, delta=1e-6)
    elapsed = time.perf_counter() - t0
    err = np.sqrt((np.abs(H_hat - H_eq) ** 2).sum(axis=(-3, -2, -1)) / (np.abs(H_eq) ** 2).sum(axis=(-3, -2, -1)))
    ok = err.max() < 1e-3 and elapsed < 1.0
    criterion(1, ok, f"max rel err {err.max():.2e} over 100 seeds, {elapsed * 1e3:.1f} ms")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def test_c02_identity_cedun_is_rls(criterion):
    worst = 0.0
    for seed in range(100):
        rng = make_rng(seed)
        _, _, _, H_eq = desk_equivalent(rng, None)
        ce = init_cedun(D, 16, rng)
        X = np.asarray(scale_pilots(ce["pilots"], D.P))
        Y = H_eq @ X + np.sqrt(S2)[:, None, None] * crandn(rng, (D.K, D.Nr_rf, 16))
        a = np.asarray(cedun_estimate(ce, X, Y, delta=1e-2))
        b = rls_estimate(X, Y, beta=0.99, delta=1e-2)
        worst = max(worst, np.abs(a - b).max() / np.abs(b).max())
    ok = worst < 1e-12
    criterion(2, ok, f"max rel deviation {worst:.1e} over 100 seeds")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_c03_reference_hbdun_matches_sca(criterion):
    B = 8
    ident = init_digital(D, 50)
    ratios = []
    for seed in range(100):
        rng = make_rng(seed)
        _, F_RF, W_RF, H_eq = desk_equivalent(rng, B)
        F0 = initial_precoder(F_RF, D.Ns, (B,))
        sc = sca_digital(H_eq, F_RF, S2, F0, I_max=50, tol=0)
        F, W = hbdun_digital(ident, H_eq, F_RF, S2, mode="reference")
        ratios.append(sum_rates(np.asarray(F), np.asarray(W), H_eq, W_RF).mean()
                      / sum_rates(sc.F_BB, sc.W_BB, H_eq, W_RF).mean())
    ratios = np.array(ratios)
    ok = abs(ratios.mean() - 1) <= 0.01
    criterion(3, ok, f"mean rate ratio {ratios.mean():.4f}; per-seed within 1%: "
                     f"{np.mean(np.abs(ratios - 1) <= 0.01):.0%}, range [{ratios.min():.3f}, {ratios.max():.3f}]")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_c04_one_layer_emulates_two_iterations(criterion):
    alpha = np.e
    q = 2 / np.log(alpha)
    worst = 0.0
    for seed in range(20):
        rng = make_rng(seed)
        _, F_RF, _, H_eq = desk_equivalent(rng, None)
        F = np.asarray(initial_precoder(F_RF, D.Ns))
        W = mmse_combiner(H_eq, F, S2)
        eps = stream_mse(H_eq, F, W, S2)          # fixed channel and beamformers
        for t in rng.uniform(-2.0, 2.0, 5):
            two = sca_t_update(sca_t_update(t, eps, alpha), eps, alpha)
            one = emulated_t_update(t, eps, 1.0, emulation_mu(eps, t, alpha), q, alpha)
            worst = max(worst, np.abs(one - two).max())
    ok = worst < 1e-9
    criterion(4, ok, f"max |one layer - two iterations| = {worst:.1e}")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def _perturb(store, rng, scale, inner_scale=1.0):
    out = {}
    for k, v in store.items():
        v = np.asarray(v)
        if k in ("Psi_F", "Psi_W"):
            out[k] = rng.uniform(-np.pi, np.pi, v.shape)
            continue
        s = scale * (inner_scale if k in CEDUN_INNER_BLOCKS else 1.0)
        noise = rng.standard_normal(v.shape) if np.isrealobj(v) else crandn(rng, v.shape)
        out[k] = v + s * noise
    return out


def _unit(rng, like):
    v = np.asarray(like)
    x = rng.standard_normal(v.shape) if np.isrealobj(v) else crandn(rng, v.shape)
    return jnp.asarray(x / np.linalg.norm(x))


def _block_errors(step):
    """Worst relative directional-derivative error per block over 20 points.

    Points: random phases, HBDUN blocks perturbed by 0.05, CEDUN blocks by
    0.05 times their training step factor, fresh channels and pilot noise.
    """
    f1 = jax.jit(stage1_loss)
    f2 = jax.jit(stage2_loss)
    cfg = TrainConfig()
    worst = {}

    def note(name, fd, ad):
        e = abs(fd - ad) / max(abs(fd), abs(ad), 1e-12)
        worst[name] = max(worst.get(name, 0.0), e)

    for point in range(20):
        rng = substream(0, 5, point)
        hb = _perturb(init_hbdun(D, 5, rng), rng, 0.05)
        ce = _perturb(init_cedun(D, 16, rng), rng, 0.05, cfg.cedun_inner_scale)
        H = jnp.asarray(SAMPLER(rng, 4))
        noise = jnp.asarray(crandn(rng, (4, D.K, D.Nr, 16)))
        s2 = jnp.asarray(S2)

        hbj = to_jax(hb)
        _, g = grad(f1, hbj, H, s2)
        for k in hbj:
            direction = {kk: jnp.zeros_like(vv) for kk, vv in hbj.items()}
            direction[k] = _unit(rng, hbj[k])
            note(f"hbdun.{k}", *directional_check(f1, hbj, g, direction, H, s2, step=step))

        analog, digital = split_analog(hb)
        analog = to_jax(analog)
        tr = {"cedun": to_jax(ce), "digital": to_jax(digital)}
        _, g = grad(f2, tr, analog, H, noise, s2)
        for part in tr:
            for k in tr[part]:
                direction = jax.tree_util.tree_map(jnp.zeros_like, tr)
                direction[part][k] = _unit(rng, tr[part][k])
                note(f"{part}.{k}", *directional_check(f2, tr, g, direction, analog, H, noise, s2, step=step))
    return worst


def test_c05_gradients_match_finite_differences(criterion):
    t0 = time.perf_counter()
    worst = _block_errors(1e-5)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    ok = not bad and elapsed < 300
    detail = f"{len(worst)} blocks, worst {max(worst.values()):.1e}, {elapsed:.0f} s"
    if bad:
        # the same check with a smaller difference step separates a wrong
        # gradient from truncation error in the difference quotient
        fine = _block_errors(1e-7)
        detail += (f"; over 1e-4 at step 1e-5: "
                   + ", ".join(f"{k} {v:.1e}" for k, v in sorted(bad.items(), key=lambda kv: -kv[1]))
                   + f"; worst at step 1e-7: {max(fine.values()):.1e}")
    criterion(5, ok, detail)
    assert ok


# -- 6 ---------------------------------------------------------------------------

def test_c06_sca_objective_descends(criterion):
    worst = -np.inf
    for seed in range(100):
        rng = make_rng(seed)
        _, F_RF, _, H_eq = desk_equivalent(rng, None)
        sc = sca_digital(H_eq, F_RF, S2, initial_precoder(F_RF, D.Ns), I_max=50, tol=0)
        worst = max(worst, np.diff(sc.trace, axis=0).max())
    ok = worst <= 1e-8
    criterion(6, ok, f"largest per-iteration increase of sum log MSE {worst:.1e} over 100 trials")
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_c07_constraints_hold_for_random_networks(criterion):
    s2 = jnp.asarray(S2)
    hb_fwd = jax.jit(lambda p, H: hbdun_forward(p, H, s2)[0])
    pipe = jax.jit(lambda ce, hb, H, n: pipeline_beamformers(ce, hb, H, n, s2)[0])
    bb_fwd = jax.jit(lambda p, H: blackbox_forward(p, H, D.Ns)[0])
    mod_err = pow_err = 0.0
    for seed in range(100):
        rng = make_rng(seed)
        H = jnp.asarray(SAMPLER(rng, 4))
        hb = to_jax(_perturb(init_hbdun(D, 5, rng), rng, 0.3))
        ce = to_jax(_perturb(init_cedun(D, 16, rng), rng, 0.3, 1e-4))
        noise = jnp.asarray(crandn(rng, (4, D.K, D.Nr, 16)))
        for bf in (hb_fwd(hb, H), pipe(ce, hb, H, noise), bb_fwd(to_jax(init_blackbox(D, rng)), H)):
            F_RF, W_RF = np.asarray(bf.F_RF), np.asarray(bf.W_RF)
            mod_err = max(mod_err, np.abs(np.abs(F_RF) * np.sqrt(D.Nt) - 1).max(),
                          np.abs(np.abs(W_RF) * np.sqrt(D.Nr) - 1).max())
            power = (np.abs(F_RF @ np.asarray(bf.F_BB)) ** 2).sum(axis=(-2, -1))
            pow_err = max(pow_err, np.abs(power - D.Ns).max())
    ok = mod_err <= 1e-12 and pow_err <= 1e-9
    criterion(7, ok, f"unit modulus err {mod_err:.1e}, power err {pow_err:.1e} "
                     "(HBDUN, joint pipeline, black box; 100 draws each)")
    assert ok


# -- 8 and 10 share one trained network ------------------------------------------

@pytest.fixture(scope="module")
def trained_hbdun():
    cfg = TrainConfig(seed=0)
    hb = init_hbdun(D, cfg.hb_layers, make_rng(0))
    t0 = time.perf_counter()
    res = train_stage1(cfg, SAMPLER, hb, D)
    H = SAMPLER(make_rng(10_000), 200)
    return cfg, res.params, H, time.perf_counter() - t0


def test_c08_trained_hbdun_near_sca(criterion, trained_hbdun):
    cfg, hb, H, elapsed = trained_hbdun
    net = evaluate_hbdun(hb, H, D, cfg).mean()
    F_RF, W_RF = analog_for_users(hb["Psi_F"], hb["Psi_W"], D.K)
    H_eq = hermitian(W_RF) @ H @ F_RF
    sc = sca_digital(H_eq, F_RF, S2, initial_precoder(F_RF, D.Ns, (len(H),)), I_max=50, tol=0)
    ref = sum_rates(sc.F_BB, sc.W_BB, H_eq, W_RF).mean()
    ok = net >= 0.9 * ref and elapsed < 600
    criterion(8, ok, f"5-layer HBDUN {net:.3f} vs SCA-50 {ref:.3f} bit/s/Hz "
                     f"(ratio {net / ref:.3f}), training {elapsed:.0f} s")
    assert ok


def test_c10_eight_bit_phases(criterion, trained_hbdun):
    cfg, hb, H, _ = trained_hbdun
    full = evaluate_hbdun(hb, H, D, cfg).mean()
    q = dict(hb, Psi_F=quantize_phases(hb["Psi_F"], 8), Psi_W=quantize_phases(hb["Psi_W"], 8))
    quant = evaluate_hbdun(q, H, D, cfg).mean()
    ok = quant >= 0.98 * full
    criterion(10, ok, f"8-bit {quant:.4f} vs unquantized {full:.4f} (ratio {quant / full:.4f})")
    assert ok


# -- 9 ---------------------------------------------------------------------------

def test_c09_joint_beats_separate(criterion):
    wins = 0
    gaps = []
    for seed in range(100):
        cfg = TrainConfig(steps_stage1=200, steps_stage2=200, seed=seed, batch_size=16)
        rng = make_rng(seed)
        hb = init_hbdun(D, cfg.hb_layers, rng)
        ce = init_cedun(D, cfg.ce_layers, rng)
        r1 = train_stage1(cfg, SAMPLER, hb, D)
        joint = train_stage2(cfg, SAMPLER, r1.params, ce, D).params
        separate = train_cedun_nmse(cfg, SAMPLER, r1.params, ce, D).params
        erng = make_rng(10_000 + seed)
        H = SAMPLER(erng, 200)
        noise = crandn(erng, H.shape[:-1] + (cfg.ce_layers,))
        a = evaluate_joint(joint, H, noise, D, cfg).mean()
        b = evaluate_joint(separate, H, noise, D, cfg).mean()
        wins += a >= b
        gaps.append(a - b)
    ok = wins >= 60
    criterion(9, ok, f"joint >= separate on {wins}/100 seeds, mean gap {np.mean(gaps):+.3f} bit/s/Hz")
    assert ok


# -- 11 --------------------------------------------------------------------------

def test_c11_pilot_overhead(criterion):
    # large profile: 64/32 antennas, 16/4 chains, L = 26, T_s = 10
    inp = OverheadInputs(q=8, L=26, T_f=16, T_s=10, N_sample=100, dims=SystemDims.large())
    q_f, q_eq = 8 * (32 * 4 + 64 * 16 + 16 * 26), 8 * 16 * 26
    frames = list(range(1, 17))
    expected = [(f, f * 10 * q_f, f * 10 * q_eq + 100 * q_f, f * (10 * q_eq + q_f)) for f in frames]
    rows = overhead_table(inp, frames)
    exact = (rows == expected and pilot_overhead("per_frame_full", inp) == q_f == 12544
             and pilot_overhead("per_slot_eq", inp) == q_eq == 3328
             and pilot_overhead("single", inp) == 16 * 10 * q_f
             and all(isinstance(v, int) for r in rows for v in r))
    slopes = np.diff(np.array(rows)[:, 1:], axis=0)
    fastest = bool(np.all(slopes[:, 0] > slopes[:, 1]) and np.all(slopes[:, 0] > slopes[:, 2]))
    offline_first = rows[1][2] > max(rows[1][1], rows[1][3])
    ok = exact and fastest
    criterion(11, ok, f"16 frame counts exact, single-timescale slope {slopes[0, 0]} vs "
                      f"{slopes[0, 2]} online / {slopes[0, 1]} offline; offline largest at 2 frames: {offline_first}")
    assert ok


# -- 12 --------------------------------------------------------------------------

def test_c12_online_tracks_offline(criterion):
    within = 0
    ratios = []
    on = OnlineConfig(n_frames=60, slots_per_frame=8, slot_batch=8, full_batch=8, longterm_steps=16)
    q = on.n_frames // 4
    for seed in range(100):
        cfg = TrainConfig(steps_stage1=300, steps_stage2=300, seed=seed, batch_size=8, eta_analog=1e-3)
        rng = make_rng(seed)
        hb = init_hbdun(D, cfg.hb_layers, rng)
        ce = init_cedun(D, cfg.ce_layers, rng)
        offline = train_stage2(cfg, SAMPLER, train_stage1(cfg, SAMPLER, hb, D).params, ce, D).params
        frames = list(channel_stream(SAMPLER, seed, on))
        _, rates, _ = online_schedule(cfg, on, iter(frames), {"cedun": ce, "hbdun": hb}, D)
        # offline network evaluated on the channels the online run saw last
        H = np.concatenate([np.concatenate(slots) for slots, _ in frames[-q:]])
        noise = crandn(make_rng(5000 + seed), H.shape[:-1] + (cfg.ce_layers,))
        r = np.mean(rates[-q:]) / evaluate_joint(offline, H, noise, D, cfg).mean()
        ratios.append(r)
        within += abs(r - 1) <= 0.05
    ok = within >= 90
    criterion(12, ok, f"final-quarter online rate within 5% of offline on {within}/100 seeds, "
                      f"median ratio {np.median(ratios):.3f}")
    assert ok


# -- 13 --------------------------------------------------------------------------

RUNS = [
    ("sample-channels", ["--set", "n_channels=20"]),
    ("run-baseline", ["--set", "n_channels=6", "--set", "estimation=\"rls\""]),
    ("train", ["--set", "train={\"steps_stage1\": 6, \"steps_stage2\": 6, \"batch_size\": 4}"]),
    ("overhead", []),
]


def _csv_digests(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*.csv"))}


def test_c13_repeat_runs_are_byte_identical(criterion, tmp_path):
    digests = []
    for rep in ("a", "b"):
        for name, extra in RUNS:
            rc = cli.main([name, "--seed", "7", "--out", str(tmp_path / rep / name)] + extra)
            assert rc == cli.EXIT_OK
        ckpt = tmp_path / rep / "train" / "checkpoint.bin"
        rc = cli.main(["evaluate", "--seed", "7", "--out", str(tmp_path / rep / "evaluate"),
                       "--set", "n_channels=6", "--set", f"checkpoint=\"{ckpt}\""])
        assert rc == cli.EXIT_OK
        digests.append(_csv_digests(tmp_path / rep))
    ok = digests[0] == digests[1] and len(digests[0]) >= 5
    criterion(13, ok, f"{len(digests[0])} CSV files identical across two runs")
    assert ok
