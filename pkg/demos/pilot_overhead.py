#!/usr/bin/env python3
"""
Pilot signalling cost per superframe for the three ways of running the
system, at the large array profile.

Single-timescale estimates full CSI every slot. The offline scheme pays
once for channel statistics and then only for the small equivalent
channel. The online scheme refreshes full CSI once per frame.
"""

from jcehb.channel import SystemDims
from jcehb.metrics import OverheadInputs, overhead_table, pilot_overhead


def main():
    d = SystemDims.large()
    inp = OverheadInputs(q=8, L=26, T_f=16, T_s=10, N_sample=100, dims=d)
    print(f"{d.Nt}x{d.Nr} antennas, {d.Nt_rf}/{d.Nr_rf} RF chains, {inp.L} pilots, "
          f"{inp.T_s} slots per frame, {inp.N_sample} samples for statistics")
    print(f"full CSI pilots {pilot_overhead('per_frame_full', inp)} bits, "
          f"equivalent CSI {pilot_overhead('per_slot_eq', inp)} bits\n")
    print(f"{'frames':>6} {'single':>10} {'offline':>10} {'online':>10}")
    for frames, single, offline, online in overhead_table(inp, range(1, 17)):
        print(f"{frames:6d} {single:10d} {offline:10d} {online:10d}")


if __name__ == "__main__":
    main()
