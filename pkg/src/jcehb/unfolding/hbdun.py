"""Hybrid-beamforming network obtained by unfolding the SCA iteration.

The analog part is a pair of trainable phase matrices. The digital part
stacks SCA iterations as layers, each wrapped in trainable multipliers
and offsets. In ``learned`` mode the inverse inside the precoder update is
replaced by the trainable approximation ``C^+ B + D^-``. ``reference``
mode keeps the exact inverse.
"""

import jax
import jax.numpy as jnp
import numpy as np

from ..beamforming import (
    DEFAULT_ALPHA, HybridBeamformers, analog_for_users, initial_precoder, mmse_combiner,
    normalize_precoder, stream_mse,
)
from ..numerics import approx_inverse, hermitian, xp_of

LAYER_KEYS = ("T_w", "Q_w", "T_lam", "q_lam", "T_f", "q_f", "B_f", "D_f", "T_t", "q_t", "mu")
MODES = ("learned", "reference")


def hbdun_analog(params, K):
    """Unit-modulus ``(F_RF, W_RF)`` from the phase blocks, with a user axis."""
    return analog_for_users(params["Psi_F"], params["Psi_W"], K)


def _matvec(T, v):
    return (T @ v[..., None])[..., 0]


def hbdun_digital_layer(state, H_eq, F_RF, lp, sigma2, alpha=DEFAULT_ALPHA, mode="learned", tau=None):
    """One unfolded SCA iteration.

    ``state = (F_BB, t)``. The precoder is renormalized before the MSE that
    drives the ``t`` update is evaluated, so ``t`` tracks the iterate that is
    passed on. Returns the new state and ``(W_BB, eps)``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    xp = xp_of(H_eq, state[0], lp["T_w"])
    F, t = state
    n_tx_rf, n_s = F.shape[-2:]
    s2 = xp.asarray(sigma2, dtype=float)
    tau = s2 if tau is None else tau
    mu = lp["mu"][..., :, None]
    a_t = alpha ** t

    W = lp["T_w"] @ mmse_combiner(H_eq, F, s2) + lp["Q_w"]
    lam = _matvec(lp["T_lam"], mu * a_t) + lp["q_lam"]
    U = hermitian(H_eq) @ W
    C = ((U * lam[..., None, :]) @ hermitian(U)).sum(axis=-3, keepdims=True)
    C = C + xp.asarray(tau, dtype=float)[..., :, None, None] * xp.eye(n_tx_rf)
    if mode == "reference":
        MU = xp.linalg.solve(C, U)
    else:
        MU = approx_inverse(C, lp["B_f"], lp["D_f"]) @ U
    F = normalize_precoder(F_RF, lp["T_f"] @ (MU * lam[..., None, :]) + lp["q_f"], n_s)
    eps = stream_mse(H_eq, F, W, s2)
    t = _matvec(lp["T_t"], t + mu * (1.0 - eps * a_t)) + lp["q_t"]
    return (F, t), (W, eps)


def layer_slice(params, i):
    return {k: params[k][i] for k in LAYER_KEYS}


def n_digital_layers(params):
    return int(np.shape(params["mu"])[0])


def hbdun_digital(params, H_eq, F_RF, sigma2, n_layers=None, mode="learned",
                  alpha=DEFAULT_ALPHA, F_init=None):
    """Digital beamformers from an equivalent channel (true or estimated).

    Starts from the power-normalized all-ones precoder with ``t = 0`` and
    runs the first ``n_layers`` layers (all by default). The returned
    combiner is the MMSE combiner at the final precoder.
    """
    H_eq = jnp.asarray(H_eq)
    F_RF = jnp.asarray(F_RF)
    n_s = params["q_f"].shape[-1]
    total = n_digital_layers(params)
    n_layers = total if n_layers is None else n_layers
    if not 0 <= n_layers <= total:
        raise ValueError(f"store has {total} layers, asked for {n_layers}")
    lead = H_eq.shape[:-3]
    F = initial_precoder(F_RF, n_s, lead) if F_init is None else jnp.asarray(F_init)
    F = jnp.broadcast_to(F, lead + F.shape[-3:])
    t = jnp.zeros(F.shape[:-2] + (n_s,))
    if n_layers:
        layers = {k: jnp.asarray(params[k])[:n_layers] for k in LAYER_KEYS}

        def body(state, lp):
            state, _ = hbdun_digital_layer(state, H_eq, F_RF, lp, sigma2, alpha, mode)
            return state, None

        (F, t), _ = jax.lax.scan(body, (F, t), layers)
    return F, mmse_combiner(H_eq, F, jnp.asarray(sigma2, dtype=float))


def hbdun_forward(params, H, sigma2, n_layers=None, mode="learned", alpha=DEFAULT_ALPHA):
    """Full hybrid design on perfect CSI; returns ``(beamformers, H_eq)``."""
    H = jnp.asarray(H)
    F_RF, W_RF = hbdun_analog(params, H.shape[-3])
    H_eq = hermitian(W_RF) @ H @ F_RF
    F_BB, W_BB = hbdun_digital(params, H_eq, F_RF, sigma2, n_layers, mode, alpha)
    return HybridBeamformers(F_RF, W_RF, F_BB, W_BB), H_eq


# -- one layer standing in for two SCA iterations ---------------------------------

def emulation_mu(eps, t, alpha=DEFAULT_ALPHA):
    """Step constant that makes one layer's ``t`` update reproduce two SCA
    updates when the MSE stays fixed at ``eps``."""
    la = np.log(alpha)
    return (1.0 + alpha ** ((1.0 - eps * alpha ** t) / la)) / la


def emulated_t_update(t, eps, T_t, mu, q_t, alpha=DEFAULT_ALPHA):
    """One-layer map ``T t - T mu eps alpha^t + q`` used in the argument that
    a layer can absorb two iterations."""
    return T_t * t - T_t * mu * eps * alpha ** t + q_t


def sca_t_update(t, eps, alpha=DEFAULT_ALPHA):
    """The conventional auxiliary-variable update."""
    return t + (1.0 - eps * alpha ** t) / np.log(alpha)
