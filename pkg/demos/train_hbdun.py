#!/usr/bin/env python3
"""
Train the unfolded beamformer for a few hundred steps and compare it with
the iterative solver it was built from.

A 5-layer network starts out as five plain SCA iterations. Training the
phases and the per-layer multipliers should close most of the gap to
running SCA for 50 iterations on the same analog stage.
"""

import argparse
import time

from jcehb.beamforming import analog_for_users, initial_precoder, sca_digital
from jcehb.channel import ChannelParams, SystemDims, make_sampler
from jcehb.metrics import stream_rates
from jcehb.numerics import hermitian, make_rng
from jcehb.training import TrainConfig, evaluate_hbdun, train_stage1
from jcehb.unfolding import init_hbdun


def sca_rate(hb, H, d, iters):
    F_RF, W_RF = analog_for_users(hb["Psi_F"], hb["Psi_W"], d.K)
    H_eq = hermitian(W_RF) @ H @ F_RF
    s2 = d.sigma2_array
    res = sca_digital(H_eq, F_RF, s2, initial_precoder(F_RF, d.Ns, (len(H),)), I_max=iters, tol=0)
    return stream_rates(res.F_BB, res.W_BB, H_eq, W_RF, s2).sum(axis=(-2, -1)).mean()


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    d = SystemDims.desk()
    sampler = make_sampler(d, ChannelParams())
    cfg = TrainConfig(steps_stage1=args.steps, seed=args.seed)
    hb = init_hbdun(d, cfg.hb_layers, make_rng(args.seed))
    H = sampler(make_rng(10_000 + args.seed), 200)

    print("before training")
    print(f"  network (5 layers)   {evaluate_hbdun(hb, H, d, cfg).mean():.3f} bit/s/Hz")
    print(f"  SCA, 50 iterations   {sca_rate(hb, H, d, 50):.3f}")

    t0 = time.time()
    res = train_stage1(cfg, sampler, hb, d)
    print(f"\ntrained {args.steps} steps in {time.time() - t0:.1f} s")
    for step, _, loss, _ in res.trace[:: max(1, args.steps // 5)]:
        print(f"  step {step:5d}   batch rate {-loss:.3f}")

    trained = res.params
    print("\nafter training, same held-out channels")
    print(f"  network (5 layers)   {evaluate_hbdun(trained, H, d, cfg).mean():.3f} bit/s/Hz")
    print(f"  SCA,  5 iterations   {sca_rate(trained, H, d, 5):.3f}")
    print(f"  SCA, 50 iterations   {sca_rate(trained, H, d, 50):.3f}")


if __name__ == "__main__":
    main()
