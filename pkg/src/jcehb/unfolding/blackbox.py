"""Fully connected baseline: trainable analog phases, then an estimation
stack applied per user to the real-split equivalent channel, then a
beamforming stack over all users that emits the digital beamformers."""

import jax.numpy as jnp

from ..beamforming import HybridBeamformers, analog_for_users, initial_precoder
from ..numerics import hermitian
from .params import blackbox_widths


def real_split(Z):
    """Flatten the last two axes and stack real parts before imaginary parts."""
    flat = Z.reshape(Z.shape[:-2] + (-1,))
    return jnp.concatenate([flat.real, flat.imag], axis=-1)


def complex_merge(v, shape):
    """Inverse of :func:`real_split` for a trailing matrix shape."""
    n = v.shape[-1] // 2
    return (v[..., :n] + 1j * v[..., n:]).reshape(v.shape[:-1] + tuple(shape))


def mlp(params, name, x):
    n = len(blackbox_widths(params, name)) - 1
    for i in range(n):
        x = x @ params[f"{name}.W{i}"] + params[f"{name}.b{i}"]
        if i < n - 1:
            x = jnp.maximum(x, 0.0)
    return x


def safe_normalize_precoder(F_RF, F_BB, Ns):
    """Power normalization that maps an all-zero precoder to the uniform one
    instead of failing."""
    norm2 = (jnp.abs(F_RF @ F_BB) ** 2).sum(axis=(-2, -1), keepdims=True)
    ok = norm2 > 0
    scaled = F_BB * (jnp.sqrt(Ns) / jnp.sqrt(jnp.where(ok, norm2, 1.0)))
    uniform = initial_precoder(F_RF, Ns, F_BB.shape[:-3])
    return jnp.where(ok, scaled, uniform)


def blackbox_digital(params, H_eq, F_RF, n_s):
    """Digital beamformers from a (true or estimated) equivalent channel."""
    H_eq = jnp.asarray(H_eq)
    K, nrr, ntr = H_eq.shape[-3:]
    h_hat = mlp(params, "ce", real_split(H_eq))                  # (..., K, 2*Nrr*Ntr)
    out = mlp(params, "bf", h_hat.reshape(h_hat.shape[:-2] + (-1,)))
    n_f = K * ntr * n_s
    re_im = out.reshape(out.shape[:-1] + (2, -1))
    z = re_im[..., 0, :] + 1j * re_im[..., 1, :]
    F_BB = z[..., :n_f].reshape(z.shape[:-1] + (K, ntr, n_s))
    W_BB = z[..., n_f:].reshape(z.shape[:-1] + (K, nrr, n_s))
    return safe_normalize_precoder(F_RF, F_BB, n_s), W_BB


def blackbox_forward(params, H, n_s):
    """Hybrid beamformers from full CSI; returns ``(beamformers, H_eq)``."""
    H = jnp.asarray(H)
    F_RF, W_RF = analog_for_users(jnp.asarray(params["Psi_F"]), jnp.asarray(params["Psi_W"]), H.shape[-3])
    H_eq = hermitian(W_RF) @ H @ F_RF
    F_BB, W_BB = blackbox_digital(params, H_eq, F_RF, n_s)
    return HybridBeamformers(F_RF, W_RF, F_BB, W_BB), H_eq
