"""Conventional hybrid beamforming.

Digital side: the log-MSE successive convex approximation (SCA) iteration
and a zero-forcing baseline. Analog side: phase parameterization, the
stochastic SCA (SSCA) surrogate averaging and phase steps, and uniform
phase quantization.

``phases_to_analog``, ``stream_mse``, ``mmse_combiner`` and
``normalize_precoder`` are array-library agnostic and are reused by the
unfolded networks.
"""

import csv
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import jax
import jax.numpy as jnp

from .errors import SingularGram, ZeroPrecoder
from .metrics import stream_rates
from .numerics import hermitian, is_concrete, xp_of

DEFAULT_ALPHA = float(np.e)


class HybridBeamformers(NamedTuple):
    F_RF: object
    W_RF: object
    F_BB: object
    W_BB: object


def phases_to_analog(phi_F, phi_W):
    """Unit-modulus analog matrices ``exp(j phi) / sqrt(N)``."""
    xp = xp_of(phi_F, phi_W)
    F_RF = xp.exp(1j * phi_F) / np.sqrt(phi_F.shape[-2])
    W_RF = xp.exp(1j * phi_W) / np.sqrt(phi_W.shape[-2])
    return F_RF, W_RF


def analog_for_users(phi_F, phi_W, K):
    """Analog matrices with a user axis; shared transmit phases (2-D
    ``phi_F``) are replicated for every user."""
    xp = xp_of(phi_F, phi_W)
    F_RF, W_RF = phases_to_analog(phi_F, phi_W)
    if F_RF.ndim == 2:
        F_RF = xp.broadcast_to(F_RF, (K,) + F_RF.shape)
    return F_RF, W_RF


def stream_mse(H_eq, F_BB, W_BB, sigma2):
    """Per-stream MSE ``|1 - w^H H f|^2 + interference + sigma^2 ||w||^2``,
    shape ``(..., K, N_s)``."""
    xp = xp_of(H_eq, F_BB, W_BB)
    K, n_tx_rf, n_s = F_BB.shape[-3:]
    G = hermitian(W_BB) @ H_eq
    f_all = xp.moveaxis(F_BB, -3, -2).reshape(F_BB.shape[:-3] + (n_tx_rf, K * n_s))
    A = G @ f_all[..., None, :, :]  # (..., K, Ns, K*Ns)
    mask = 1.0 - xp.eye(K * n_s).reshape(K, n_s, K * n_s)
    interf = (xp.abs(A) ** 2 * mask).sum(axis=-1)
    own = (G * F_BB.swapaxes(-1, -2)).sum(axis=-1)
    s2 = xp.asarray(sigma2, dtype=float)[..., :, None]
    return xp.abs(1.0 - own) ** 2 + interf + s2 * (xp.abs(W_BB) ** 2).sum(axis=-2)


def mmse_combiner(H_eq, F_BB, sigma2):
    """MMSE receive combiners ``(sum_v H F_v F_v^H H^H + sigma^2 I)^{-1} H F_k``."""
    xp = xp_of(H_eq, F_BB)
    K, n_tx_rf, n_s = F_BB.shape[-3:]
    f_all = xp.moveaxis(F_BB, -3, -2).reshape(F_BB.shape[:-3] + (n_tx_rf, K * n_s))
    HF = H_eq @ f_all[..., None, :, :]                   # (..., K, Nrr, K*Ns)
    s2 = xp.asarray(sigma2, dtype=float)[..., :, None, None]
    R = HF @ hermitian(HF) + s2 * xp.eye(H_eq.shape[-2])
    return xp.linalg.solve(R, H_eq @ F_BB)


def normalize_precoder(F_RF, F_BB, Ns):
    """Scale each user's ``F_BB`` so that ``||F_RF F_BB||_F^2 = Ns``."""
    xp = xp_of(F_RF, F_BB)
    norm = xp.sqrt((xp.abs(F_RF @ F_BB) ** 2).sum(axis=(-2, -1), keepdims=True))
    if is_concrete(norm) and np.any(np.asarray(norm) == 0):
        raise ZeroPrecoder("F_RF F_BB has zero norm")
    return F_BB * (np.sqrt(Ns) / norm)


def initial_precoder(F_RF, Ns, lead=()):
    """All-ones-direction digital precoder meeting the power constraint."""
    xp = xp_of(F_RF)
    K, _, n_tx_rf = F_RF.shape[-3:]
    ones = xp.ones(tuple(lead) + (K, n_tx_rf, Ns), dtype=complex)
    return normalize_precoder(F_RF, ones, Ns)


# -- SCA digital beamforming -------------------------------------------------

@dataclass
class ScaResult:
    F_BB: np.ndarray
    W_BB: np.ndarray
    trace: np.ndarray          # (iterations, ...) sum of log MSE per iteration
    t: np.ndarray
    iterations: int


def sca_digital(H_eq, F_RF, sigma2, F_BB_init, alpha=DEFAULT_ALPHA, tau=None,
                I_max=50, tol=1e-6, project_each_iter=False):
    """Log-MSE SCA for the digital precoders/combiners.

    ``tau`` (per-user regularizer in the precoder update) defaults to
    ``sigma2``. The power constraint is restored by a final normalization;
    ``project_each_iter`` instead normalizes every new precoder before its
    MSE is evaluated, which is the per-layer behaviour of the unfolded
    network. ``tol = 0`` disables
    early stopping.
    """
    H_eq = np.asarray(H_eq)
    F = np.asarray(F_BB_init)
    sigma2 = np.asarray(sigma2, dtype=float)
    tau = sigma2 if tau is None else np.broadcast_to(np.asarray(tau, dtype=float), sigma2.shape)
    K, n_tx_rf, n_s = F.shape[-3:]
    log_a = np.log(alpha)
    t = np.zeros(F.shape[:-3] + (K, n_s))
    trace = []
    eye = np.eye(n_tx_rf)
    for _ in range(I_max):
        W = mmse_combiner(H_eq, F, sigma2)
        lam = alpha ** t / log_a
        U = hermitian(H_eq) @ W                                   # (..., K, Ntr, Ns)
        S = ((U * lam[..., None, :]) @ hermitian(U)).sum(axis=-3, keepdims=True)
        C = S + tau[..., :, None, None] * eye
        F = np.linalg.solve(C, U) * lam[..., None, :]
        if project_each_iter:
            F = normalize_precoder(F_RF, F, n_s)
        eps = stream_mse(H_eq, F, W, sigma2)
        obj = np.log(eps).sum(axis=(-2, -1))
        t = t + (1.0 - eps * alpha ** t) / log_a
        done = bool(trace) and tol > 0 and np.all(np.abs(obj - trace[-1]) < tol)
        trace.append(obj)
        if done:
            break
    if trace:
        F = normalize_precoder(F_RF, F, n_s)
    W = mmse_combiner(H_eq, F, sigma2)
    tr = np.stack(trace) if trace else np.zeros((0,) + F.shape[:-3])
    return ScaResult(F_BB=F, W_BB=W, trace=tr, t=t, iterations=len(trace))


def _zf_rows(H_eq, n_s):
    n_rx_rf = H_eq.shape[-2]
    if n_s == n_rx_rf:
        return H_eq
    U, _, _ = np.linalg.svd(H_eq)
    return hermitian(U[..., :n_s]) @ H_eq


def zf_digital(H_eq, F_RF, sigma2, n_s, cond_max=1e12):
    """Zero-forcing precoders on the stacked effective channel.

    Each user's rows are reduced to its ``n_s`` dominant left singular
    directions when ``N_r_rf > n_s``; with ``N_r_rf == n_s`` the equivalent
    channels are stacked as they are. Raises ``SingularGram`` if the
    stacked channel is rank deficient. Combiners are MMSE.
    """
    H_eq = np.asarray(H_eq)
    K, _, n_tx_rf = H_eq.shape[-3:]
    rows = _zf_rows(H_eq, n_s)
    Hs = rows.reshape(rows.shape[:-3] + (K * n_s, n_tx_rf))
    gram = Hs @ hermitian(Hs)
    if np.any(np.linalg.cond(gram) > cond_max):
        raise SingularGram("stacked equivalent channel is rank deficient")
    Fs = hermitian(Hs) @ np.linalg.inv(gram)                      # (..., Ntr, K*Ns)
    F = np.moveaxis(Fs.reshape(Fs.shape[:-1] + (K, n_s)), -2, -3)
    F = normalize_precoder(F_RF, F, n_s)
    return F, mmse_combiner(H_eq, F, sigma2)


# -- phase quantization ------------------------------------------------------

def quantize_phases(phi, bits):
    """Nearest of ``2**bits`` uniform levels on ``[-pi, pi)``; ties go to the
    lower level. Output lies on the grid, so errors are angular (mod 2 pi)."""
    if bits < 1:
        raise ValueError("need at least one bit")
    n = 2 ** bits
    step = 2 * np.pi / n
    pos = (np.mod(np.asarray(phi, dtype=float) + np.pi, 2 * np.pi)) / step
    lower = np.floor(pos)
    idx = np.where(pos - lower > 0.5, lower + 1, lower).astype(np.int64) % n
    return -np.pi + idx * step


def angular_error(a, b):
    """Absolute phase difference wrapped to ``[0, pi]``."""
    d = np.mod(np.asarray(a) - np.asarray(b) + np.pi, 2 * np.pi) - np.pi
    return np.abs(d)


# -- SSCA long-term phase optimization ---------------------------------------

def rho_schedule(t, exponent=0.8):
    return (1.0 + t) ** (-exponent)


@dataclass(frozen=True)
class SurrogateState:
    """Running averages of the SSCA surrogate.

    ``tau_reg`` is the quadratic coefficient of the surrogate; the phase step
    uses only the averaged gradient, so it is recorded but not applied.
    """
    phi_F: np.ndarray
    phi_W: np.ndarray
    f: float = 0.0
    f_phi_F: np.ndarray = None
    f_phi_W: np.ndarray = None
    rho_t: float = None
    eta: float = 0.05
    tau_reg: float = 0.0
    J: int = 10

    def __post_init__(self):
        if self.f_phi_F is None:
            object.__setattr__(self, "f_phi_F", np.zeros_like(np.asarray(self.phi_F, dtype=float)))
        if self.f_phi_W is None:
            object.__setattr__(self, "f_phi_W", np.zeros_like(np.asarray(self.phi_W, dtype=float)))


def ssca_accumulate(state, r0_value, r0_grad, t, rho=None, rho_exponent=0.8):
    """Fold a fresh objective value and phase gradient into the averages."""
    if t < 0:
        raise ValueError("t must be non-negative")
    rho = rho_schedule(t, rho_exponent) if rho is None else rho
    g_F, g_W = r0_grad
    return replace(state,
                   f=(1 - rho) * state.f + rho * float(r0_value),
                   f_phi_F=(1 - rho) * state.f_phi_F + rho * np.asarray(g_F),
                   f_phi_W=(1 - rho) * state.f_phi_W + rho * np.asarray(g_W),
                   rho_t=rho)


def ssca_phase_step(state):
    """Move the phases against the averaged gradient with step ``eta``."""
    return replace(state,
                   phi_F=state.phi_F - state.eta * state.f_phi_F,
                   phi_W=state.phi_W - state.eta * state.f_phi_W)


def neg_sum_rate_phases(phi_F, phi_W, F_BB, W_BB, H, sigma2, P=1.0):
    """Negative mean sum rate as a function of the phases with the digital
    beamformers held fixed."""
    K = H.shape[-3]
    F_RF, W_RF = analog_for_users(phi_F, phi_W, K)
    H_eq = hermitian(W_RF) @ H @ F_RF
    r = stream_rates(F_BB, W_BB, H_eq, W_RF, sigma2, P)
    return -jnp.mean(r.sum(axis=(-2, -1)))


_phase_value_and_grad = jax.jit(jax.value_and_grad(neg_sum_rate_phases, argnums=(0, 1)))


def phase_gradient(phi_F, phi_W, F_BB, W_BB, H, sigma2, P=1.0):
    """``(r0, (d r0/d phi_F, d r0/d phi_W))`` as NumPy values."""
    v, (gF, gW) = _phase_value_and_grad(jnp.asarray(phi_F), jnp.asarray(phi_W),
                                        jnp.asarray(F_BB), jnp.asarray(W_BB),
                                        jnp.asarray(H), jnp.asarray(sigma2, dtype=float), P)
    return float(v), (np.asarray(gF), np.asarray(gW))


@dataclass(frozen=True)
class SscaConfig:
    n_outer: int = 100
    J: int = 10
    eta: float = 0.05
    rho_exponent: float = 0.8
    rho_const: float = None      # fixed rho for every t when set
    alpha: float = DEFAULT_ALPHA
    batch: int = 1
    tau_reg: float = 0.0


@dataclass
class SscaResult:
    phi_F: np.ndarray
    phi_W: np.ndarray
    trace: list = field(default_factory=list)   # rows (t, objective, sum_rate)


def ssca_outer(sampler, dims, config, phi_F, phi_W, rng):
    """Stochastic SCA over the analog phases.

    Each outer step draws a channel batch, solves the digital problem for
    ``J`` SCA iterations at the current phases, and takes a phase step on
    the running-average gradient of ``r0 = -sum rate``.
    """
    state = SurrogateState(phi_F=np.asarray(phi_F, float), phi_W=np.asarray(phi_W, float),
                           eta=config.eta, tau_reg=config.tau_reg, J=config.J)
    sigma2 = dims.sigma2_array
    trace = []
    for t in range(config.n_outer):
        H = sampler(rng, config.batch)
        F_RF, W_RF = analog_for_users(state.phi_F, state.phi_W, dims.K)
        H_eq = hermitian(W_RF) @ H @ F_RF
        F0 = initial_precoder(F_RF, dims.Ns, lead=H.shape[:-3])
        res = sca_digital(H_eq, F_RF, sigma2, F0, alpha=config.alpha, I_max=config.J)
        r0, grad = phase_gradient(state.phi_F, state.phi_W, res.F_BB, res.W_BB, H, sigma2, dims.P)
        state = ssca_accumulate(state, r0, grad, t, rho=config.rho_const,
                                rho_exponent=config.rho_exponent)
        state = ssca_phase_step(state)
        trace.append((t, state.f, -r0))
    return SscaResult(phi_F=state.phi_F, phi_W=state.phi_W, trace=trace)


TRACE_CSV_COLUMNS = ("iteration", "objective", "sum_rate")


def write_trace_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_CSV_COLUMNS)
        for it, obj, rate in rows:
            w.writerow([it, repr(float(obj)), repr(float(rate))])
