"""SINR, sum rate, NMSE, pilot-overhead accounting and complexity counts.

Rate functions work on NumPy or JAX arrays (so the training loss can reuse
them) and broadcast over leading batch axes. Beamformers are any object
exposing ``F_RF, W_RF, F_BB, W_BB`` attributes with the layout documented
in :mod:`jcehb.channel`.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroReference
from .numerics import hermitian, is_concrete, xp_of

HBDUN_CLAIMED_EXPONENT = 2.37


def stream_sinr(F_BB, W_BB, H_eq, W_RF, sigma2, P=1.0):
    """SINR of every stream, shape ``(..., K, N_s)``.

    A stream whose combiner is zero gets SINR 0 rather than NaN.
    """
    xp = xp_of(F_BB, W_BB, H_eq, W_RF)
    K, n_tx_rf, n_s = F_BB.shape[-3:]
    G = hermitian(W_BB) @ H_eq                                  # (..., K, Ns, Ntr)
    f_all = xp.moveaxis(F_BB, -3, -2).reshape(F_BB.shape[:-3] + (n_tx_rf, K * n_s))
    power = xp.abs(G @ f_all[..., None, :, :]) ** 2  # (..., K, Ns, K*Ns)
    mask = 1.0 - xp.eye(K * n_s).reshape(K, n_s, K * n_s)
    interf = (power * mask).sum(axis=-1)
    sig = xp.abs((G * F_BB.swapaxes(-1, -2)).sum(axis=-1)) ** 2
    s2 = xp.asarray(sigma2, dtype=float)[..., :, None]
    noise = s2 / P * (xp.abs(W_RF @ W_BB) ** 2).sum(axis=-2)
    den = interf + noise
    ok = den > 0
    return xp.where(ok, sig / xp.where(ok, den, 1.0), 0.0)


def stream_rates(F_BB, W_BB, H_eq, W_RF, sigma2, P=1.0):
    xp = xp_of(F_BB, W_BB, H_eq, W_RF)
    return xp.log2(1.0 + stream_sinr(F_BB, W_BB, H_eq, W_RF, sigma2, P))


@dataclass
class RateReport:
    gamma: np.ndarray
    per_user: np.ndarray
    total: np.ndarray

    def rows(self):
        """Flat rows ``(sample, user, stream, sinr, user_rate, sum_rate)``."""
        g = np.asarray(self.gamma)
        g = g.reshape((-1,) + g.shape[-2:])
        pu = np.asarray(self.per_user).reshape(g.shape[0], -1)
        tot = np.asarray(self.total).reshape(-1)
        for b in range(g.shape[0]):
            for k in range(g.shape[1]):
                for s in range(g.shape[2]):
                    yield b, k, s, float(g[b, k, s]), float(pu[b, k]), float(tot[b])


RATE_CSV_COLUMNS = ("sample", "user", "stream", "sinr", "user_rate", "sum_rate")


def sinr(beamformers, H_eq, dims, k, l):
    """SINR of stream ``l`` of user ``k``."""
    g = stream_sinr(beamformers.F_BB, beamformers.W_BB, H_eq, beamformers.W_RF,
                    dims.sigma2, dims.P)
    return g[..., k, l]


def sum_rate(beamformers, H_eq, dims):
    """Per-stream SINR, per-user rate and total rate in bits/s/Hz."""
    xp = xp_of(beamformers.F_BB, H_eq)
    g = stream_sinr(beamformers.F_BB, beamformers.W_BB, H_eq, beamformers.W_RF,
                    dims.sigma2, dims.P)
    per_user = xp.log2(1.0 + g).sum(axis=-1)
    return RateReport(gamma=g, per_user=per_user, total=per_user.sum(axis=-1))


def write_rate_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RATE_CSV_COLUMNS)
        for row in report.rows():
            w.writerow([row[0], row[1], row[2]] + [repr(v) for v in row[3:]])


def nmse(H_hat, H, axis=None):
    """``||H_hat - H||^2 / ||H||^2``, over all entries or along ``axis``."""
    xp = xp_of(H_hat, H)
    num = (xp.abs(H_hat - H) ** 2).sum(axis=axis)
    den = (xp.abs(H) ** 2).sum(axis=axis)
    if is_concrete(den) and np.any(np.asarray(den) == 0):
        raise ZeroReference("reference channel has zero norm")
    return num / den


# -- pilot overhead ---------------------------------------------------------

@dataclass(frozen=True)
class OverheadInputs:
    q: int
    L: int
    T_f: int
    T_s: int
    N_sample: int
    dims: object = field(repr=False)

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be at least 1")
        if min(self.L, self.T_f, self.T_s, self.N_sample) < 0:
            raise ValueError("counts must be non-negative")


OVERHEAD_SCHEMES = ("per_frame_full", "per_slot_eq", "single", "offline", "online")


def pilot_overhead(scheme, inp):
    """Signalling bits needed to convey pilot configurations (exact int)."""
    d = inp.dims
    q_full = inp.q * (d.Nr * d.Nr_rf + d.Nt * d.Nt_rf + d.Nt_rf * inp.L)
    q_eq = inp.q * d.Nt_rf * inp.L
    if scheme == "per_frame_full":
        return q_full
    if scheme == "per_slot_eq":
        return q_eq
    if scheme == "single":
        return inp.T_f * inp.T_s * q_full
    if scheme == "offline":
        return inp.T_f * inp.T_s * q_eq + inp.N_sample * q_full
    if scheme == "online":
        return inp.T_f * (inp.T_s * q_eq + q_full)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {OVERHEAD_SCHEMES}")


def overhead_table(inp, frame_counts):
    """Rows ``(frames, single, offline, online)`` with ``T_f`` swept."""
    rows = []
    for tf in frame_counts:
        sub = OverheadInputs(inp.q, inp.L, tf, inp.T_s, inp.N_sample, inp.dims)
        rows.append((tf,) + tuple(pilot_overhead(s, sub) for s in ("single", "offline", "online")))
    return rows


OVERHEAD_CSV_COLUMNS = ("frames", "single", "offline", "online")


def write_overhead_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OVERHEAD_CSV_COLUMNS)
        w.writerows(rows)


# -- complexity -------------------------------------------------------------

@dataclass
class ComplexityReport:
    rls: int
    ssca: int
    ssca_terms: dict
    cedun: int
    hbdun: float
    hbdun_terms: dict
    blackbox: int
    hbdun_exponent_used: float = 3.0
    hbdun_exponent_claimed: float = HBDUN_CLAIMED_EXPONENT
    notes: str = ("HBDUN inversion-approximation term evaluated with the schoolbook "
                  "exponent 3; the sub-cubic exponent is not reproduced")


def complexity_report(dims, L_r, L_s, L_c, L_h, ce_widths=(), bf_widths=()):
    """Operation-count estimates from the big-O expressions of each method."""
    K, Ns, Ntr, Nrr = dims.K, dims.Ns, dims.Nt_rf, dims.Nr_rf
    quad_terms = {"inverse": K * Ns * Ntr ** 3,
                  "cross_user": K ** 2 * Ns ** 2 * Ntr ** 2 * Nrr,
                  "combiner": K * Ns * Ntr ** 2 * Nrr}
    ssca_terms = {name: L_s * v for name, v in quad_terms.items()}
    hbdun_terms = {name: L_h * v for name, v in quad_terms.items()}
    bb = sum(K * a * b for a, b in zip(ce_widths[:-1], ce_widths[1:]))
    bb += sum(K * a * b for a, b in zip(bf_widths[:-1], bf_widths[1:]))
    return ComplexityReport(
        rls=L_r * K * Ntr ** 2,
        ssca=sum(ssca_terms.values()),
        ssca_terms=ssca_terms,
        cedun=L_c * K * Ntr ** 2,
        hbdun=sum(hbdun_terms.values()),
        hbdun_terms=hbdun_terms,
        blackbox=bb,
    )
