#!/usr/bin/env python3
"""
Mixed-timescale online training from a cold start.

Every slot the estimator and digital layers take one step on the slot's
channels; at the end of each frame the phases take a few steps on all
full-CSI samples collected so far. The per-frame rate climbs toward that
of a network trained offline on the same channel statistics.
"""

import argparse

import numpy as np

from jcehb.channel import ChannelParams, SystemDims, make_sampler
from jcehb.numerics import crandn, make_rng
from jcehb.training import (
    OnlineConfig, TrainConfig, channel_stream, evaluate_joint, online_schedule, train_stage1,
    train_stage2,
)
from jcehb.unfolding import init_cedun, init_hbdun


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    d = SystemDims.desk()
    sampler = make_sampler(d, ChannelParams())
    cfg = TrainConfig(steps_stage1=300, steps_stage2=300, seed=args.seed, batch_size=8, eta_analog=1e-3)
    on = OnlineConfig(n_frames=args.frames, slots_per_frame=8, slot_batch=8, full_batch=8, longterm_steps=16)
    rng = make_rng(args.seed)
    hb = init_hbdun(d, cfg.hb_layers, rng)
    ce = init_cedun(d, cfg.ce_layers, rng)

    frames = list(channel_stream(sampler, args.seed, on))
    _, rates, _ = online_schedule(cfg, on, iter(frames), {"cedun": ce, "hbdun": hb}, d)

    offline = train_stage2(cfg, sampler, train_stage1(cfg, sampler, hb, d).params, ce, d).params
    q = on.n_frames // 4
    H = np.concatenate([np.concatenate(slots) for slots, _ in frames[-q:]])
    noise = crandn(make_rng(5000 + args.seed), H.shape[:-1] + (cfg.ce_layers,))
    ref = evaluate_joint(offline, H, noise, d, cfg).mean()

    print("frame  mean rate")
    for f in range(0, on.n_frames, max(1, on.n_frames // 12)):
        print(f"{f:5d}  {rates[f]:.3f}  " + "#" * int(20 * rates[f] / ref))
    print(f"\nlast {q} frames: online {np.mean(rates[-q:]):.3f}, offline-trained {ref:.3f} bit/s/Hz")


if __name__ == "__main__":
    main()
