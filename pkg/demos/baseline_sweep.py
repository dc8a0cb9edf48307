#!/usr/bin/env python3
"""
Conventional chain on the desk profile: estimate the equivalent channel
from uplink pilots with LS and RLS, then design digital beamformers with
SCA or zero forcing, and watch the sum rate move with SNR.
"""

import argparse

import numpy as np

from jcehb.beamforming import analog_for_users, initial_precoder, sca_digital, zf_digital
from jcehb.channel import ChannelParams, SystemDims, make_sampler, received_pilot
from jcehb.estimation import ls_estimate, orthogonal_pilots, rls_estimate
from jcehb.metrics import nmse, stream_rates
from jcehb.numerics import hermitian, make_rng


def rate(F_BB, W_BB, H_eq, W_RF, s2):
    return stream_rates(F_BB, W_BB, H_eq, W_RF, s2).sum(axis=(-2, -1)).mean()


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--channels", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = make_rng(args.seed)
    d = SystemDims.desk()
    H = make_sampler(d, ChannelParams())(rng, args.channels)

    # random phases stand in for an optimized analog stage here
    F_RF, W_RF = analog_for_users(rng.uniform(-np.pi, np.pi, (d.Nt, d.Nt_rf)),
                                  rng.uniform(-np.pi, np.pi, (d.K, d.Nr, d.Nr_rf)), d.K)
    H_eq = hermitian(W_RF) @ H @ F_RF
    X = orthogonal_pilots(d.K, d.Nt_rf, 16, d.P)

    print(f"{args.channels} desk channels, {d.Nt}x{d.Nr} antennas, K={d.K}, 16 pilots")
    print(f"{'SNR':>5} {'NMSE LS':>9} {'NMSE RLS':>9} {'SCA/RLS':>8} {'ZF/RLS':>7} {'SCA/true':>9}")
    for snr in (-10, 0, 10, 20):
        ds = d.with_snr(snr)
        s2 = ds.sigma2_array
        Y = received_pilot(H_eq, H, F_RF, W_RF, X, s2, rng=rng)
        H_ls = ls_estimate(Y, X)
        H_rls = rls_estimate(X, Y)
        F0 = initial_precoder(F_RF, d.Ns, (len(H),))
        sca_hat = sca_digital(H_rls, F_RF, s2, F0)
        sca_true = sca_digital(H_eq, F_RF, s2, F0)
        F_zf, W_zf = zf_digital(H_rls, F_RF, s2, d.Ns)
        print(f"{snr:5d} {nmse(H_ls, H_eq):9.4f} {nmse(H_rls, H_eq):9.4f} "
              f"{rate(sca_hat.F_BB, sca_hat.W_BB, H_eq, W_RF, s2):8.3f} "
              f"{rate(F_zf, W_zf, H_eq, W_RF, s2):7.3f} "
              f"{rate(sca_true.F_BB, sca_true.W_BB, H_eq, W_RF, s2):9.3f}")
    print("rates in bit/s/Hz, always scored on the true equivalent channel")


if __name__ == "__main__":
    main()
