"""Clustered ULA channel model, equivalent channels and uplink pilot synthesis.

Array layout used throughout the package (leading batch axes optional)::

    H      (..., K, N_r, N_t)        full channel per user
    F_RF   (..., K, N_t, N_t_rf)     transmit analog precoder (replicated
                                      per user when the phases are shared)
    W_RF   (..., K, N_r, N_r_rf)     receive analog combiner
    H_eq   (..., K, N_r_rf, N_t_rf)
    X      (..., K, N_t_rf, L)       uplink pilots
"""

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DimensionMismatch, PilotPowerViolation, SchemaError
from .numerics import crandn, hermitian, is_concrete, xp_of


@dataclass(frozen=True)
class SystemDims:
    Nt: int
    Nr: int
    Nt_rf: int
    Nr_rf: int
    K: int
    Ns: int
    P: float = 1.0
    sigma2: tuple = (0.1,)

    def __post_init__(self):
        s2 = tuple(float(s) for s in np.atleast_1d(self.sigma2))
        if len(s2) == 1:
            s2 = s2 * self.K
        object.__setattr__(self, "sigma2", s2)
        if len(s2) != self.K:
            raise ValueError(f"sigma2 needs one value per user ({self.K}), got {len(s2)}")
        if not self.K * self.Ns <= self.Nt_rf <= self.Nt:
            raise ValueError("need K*Ns <= Nt_rf <= Nt")
        if not self.Ns <= self.Nr_rf <= self.Nr:
            raise ValueError("need Ns <= Nr_rf <= Nr")
        if self.P <= 0 or min(s2) <= 0:
            raise ValueError("P and every sigma2 must be positive")

    @property
    def sigma2_array(self):
        return np.asarray(self.sigma2)

    @classmethod
    def from_snr(cls, snr_db, **dims):
        """SNR is P / sigma^2 with P = 1 unless given."""
        P = dims.pop("P", 1.0)
        return cls(P=P, sigma2=(P * 10 ** (-snr_db / 10.0),), **dims)

    @classmethod
    def desk(cls, snr_db=10.0):
        return cls.from_snr(snr_db, Nt=8, Nr=4, Nt_rf=4, Nr_rf=2, K=2, Ns=1)

    @classmethod
    def large(cls, snr_db=10.0):
        return cls.from_snr(snr_db, Nt=64, Nr=32, Nt_rf=16, Nr_rf=4, K=4, Ns=4)

    def with_snr(self, snr_db):
        d = asdict(self)
        d.pop("sigma2")
        return SystemDims.from_snr(snr_db, **d)


@dataclass(frozen=True)
class ChannelParams:
    n_clusters: int = 4
    n_rays: int = 2
    sigma_alpha2: float = 0.1
    aoa_range: tuple = (-np.pi / 3, np.pi / 3)
    aod_range: tuple = (-np.pi / 3, np.pi / 3)
    d_over_lambda: float = 0.5

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_rays < 1:
            raise ValueError("need at least one cluster and one ray")
        if self.sigma_alpha2 <= 0:
            raise ValueError("sigma_alpha2 must be positive")
        for lo, hi in (self.aoa_range, self.aod_range):
            if not (-np.pi < lo <= hi < np.pi):
                raise ValueError("angle ranges must lie inside (-pi, pi)")


@dataclass
class ChannelRealization:
    H: np.ndarray
    gains: np.ndarray = field(repr=False)
    aoa: np.ndarray = field(repr=False)
    aod: np.ndarray = field(repr=False)


def array_response(n, d_over_lambda, phi):
    """ULA steering vector(s); ``phi`` may be an array, output gets a trailing
    axis of length ``n``."""
    phi = np.asarray(phi, dtype=float)
    idx = np.arange(n)
    phase = -2j * np.pi * d_over_lambda * np.sin(phi)[..., None] * idx
    return np.exp(phase) / np.sqrt(n)


def sample_channel(dims, params, rng, batch=None):
    """Draw one channel per user (and per batch element if ``batch``)."""
    lead = (dims.K,) if batch is None else (batch, dims.K)
    n_paths = params.n_clusters * params.n_rays
    shape = lead + (params.n_clusters, params.n_rays)
    gains = crandn(rng, shape, params.sigma_alpha2)
    aoa = rng.uniform(*params.aoa_range, size=shape)
    aod = rng.uniform(*params.aod_range, size=shape)
    a_r = array_response(dims.Nr, params.d_over_lambda, aoa).reshape(lead + (n_paths, dims.Nr))
    a_t = array_response(dims.Nt, params.d_over_lambda, aod).reshape(lead + (n_paths, dims.Nt))
    g = gains.reshape(lead + (n_paths,))
    scale = np.sqrt(dims.Nt * dims.Nr / n_paths)
    H = scale * np.einsum("...p,...pr,...pt->...rt", g, a_r, a_t.conj())
    return ChannelRealization(H=H, gains=gains, aoa=aoa, aod=aod)


def make_sampler(dims, params):
    """``sampler(rng, batch) -> H`` closure over fixed statistics."""
    def sampler(rng, batch):
        return sample_channel(dims, params, rng, batch).H
    return sampler


def _as_h(H):
    return H.H if isinstance(H, ChannelRealization) else H


def equivalent_channel(H, F_RF, W_RF):
    """``W_RF^H H F_RF`` per user."""
    H = _as_h(H)
    if H.shape[-2] != W_RF.shape[-2] or H.shape[-1] != F_RF.shape[-2]:
        raise DimensionMismatch(
            f"H {H.shape[-2:]} not conformable with W_RF {W_RF.shape[-2:]} / F_RF {F_RF.shape[-2:]}")
    return hermitian(W_RF) @ H @ F_RF


def received_pilot(H_eq, H, F_RF, W_RF, X, sigma2, noise=None, rng=None, P=None):
    """Uplink pilot observation for every user.

    ``Y_k = H_eq,k X_k + W_RF,k^H H_k sum_{u != k} F_RF,u X_u + W_RF,k^H Z_k``
    with ``Z_k`` having i.i.d. CN(0, sigma2_k) entries. Noise comes either
    from ``noise`` (unit-variance CN draws shaped ``(..., K, N_r, L)``,
    which keeps the function usable under ``jax.jit``) or from ``rng``.
    With neither, the observation is noiseless.
    """
    H = _as_h(H)
    xp = xp_of(H_eq, H, F_RF, W_RF, X)
    if P is not None and is_concrete(X):
        col_pow = np.sum(np.abs(np.asarray(X)) ** 2, axis=-2)
        if np.any(col_pow > P * (1 + 1e-9)):
            raise PilotPowerViolation(f"pilot column power {col_pow.max():.6g} exceeds P={P}")
    own = F_RF @ X
    total = own.sum(axis=-3, keepdims=True)
    Y = H_eq @ X + hermitian(W_RF) @ H @ (total - own)
    if noise is None and rng is not None:
        noise = crandn(rng, H.shape[:-1] + (X.shape[-1],))
    if noise is not None:
        s = xp.sqrt(xp.asarray(sigma2, dtype=float))[..., :, None, None]
        Y = Y + hermitian(W_RF) @ (s * noise)
    return Y


# -- persistence ------------------------------------------------------------

def save_channels(path, H, dims, params, seed):
    """Write a channel batch as CSV.

    Line 1 is ``# `` followed by a JSON header (dims, params, seed, shape);
    line 2 names the columns; every further row holds one user's matrix for
    one sample, flattened row-major with real/imag interleaved.
    """
    H = np.asarray(_as_h(H))
    if H.ndim == 3:
        H = H[None]
    header = {"dims": asdict(dims), "params": asdict(params), "seed": seed,
              "shape": list(H.shape)}
    n_r, n_t = H.shape[-2:]
    cols = ["sample", "user"] + [f"{p}_{i}_{j}" for i in range(n_r) for j in range(n_t) for p in ("re", "im")]
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for b in range(H.shape[0]):
            for k in range(H.shape[1]):
                flat = H[b, k].reshape(-1)
                inter = np.empty(2 * flat.size)
                inter[0::2] = flat.real
                inter[1::2] = flat.imag
                w.writerow([b, k] + [repr(float(v)) for v in inter])


def load_channels(path):
    """Inverse of :func:`save_channels`; returns ``(H, header)``."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise SchemaError("missing JSON header line")
        header = json.loads(first[2:])
        rows = list(csv.reader(fh))
    shape = header["shape"]
    if not rows or rows[0][:2] != ["sample", "user"]:
        raise SchemaError("missing column header")
    H = np.zeros(shape, dtype=np.complex128)
    for row in rows[1:]:
        b, k = int(row[0]), int(row[1])
        vals = np.array([float(v) for v in row[2:]])
        if vals.size != 2 * shape[2] * shape[3]:
            raise SchemaError(f"row for sample {b} user {k} has {vals.size} values")
        H[b, k] = (vals[0::2] + 1j * vals[1::2]).reshape(shape[2], shape[3])
    return H, header
