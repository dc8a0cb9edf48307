"""Channel-estimation network obtained by unfolding the RLS recursion.

Each layer consumes one pilot column and applies the RLS updates with a
trainable multiplier ``T`` and offset ``q`` around every sub-step and a
trainable forgetting factor ``gamma``.
"""

import jax
import jax.numpy as jnp
import numpy as np

from ..channel import received_pilot
from ..numerics import crandn, hermitian, xp_of

LAYER_KEYS = ("T_g", "q_g", "T_v", "q_v", "T_p", "q_p", "T_w", "q_w", "gamma")


def scale_pilots(X, P=1.0):
    """Scale every pilot column to power ``P``; all-zero columns stay zero."""
    xp = xp_of(X)
    n2 = (xp.abs(X) ** 2).sum(axis=-2, keepdims=True)
    safe = xp.where(n2 > 0, n2, 1.0)
    return X * (np.sqrt(P) / xp.sqrt(safe))


def cedun_layer(state, x, y, lp):
    """One unfolded RLS step.

    ``state = (W, P)`` with ``W`` shaped ``(..., K, N_t_rf, N_r_rf)`` and ``P``
    ``(..., K, N_t_rf, N_t_rf)``; ``x`` and ``y`` are column vectors
    ``(..., K, N, 1)``; ``lp`` holds one layer's blocks (leading user axis).
    The residual uses the incoming ``W``.
    """
    W, P = state
    gamma = lp["gamma"][..., :, None, None]
    g = lp["T_g"] @ (P @ x) + lp["q_g"]
    v = lp["T_v"] @ (g / (gamma + hermitian(g) @ x)) + lp["q_v"]
    P = lp["T_p"] @ ((P - v @ hermitian(g)) / gamma) + lp["q_p"]
    e = y - hermitian(W) @ x
    W = lp["T_w"] @ (W + v @ hermitian(e)) + lp["q_w"]
    return W, P


def cedun_estimate(params, X, Y, delta=1e-2):
    """Run all layers over pilots ``X`` ``(..., K, N_t_rf, L)`` and
    observations ``Y`` ``(..., K, N_r_rf, L)``; returns ``W^H``."""
    X = jnp.asarray(X)
    Y = jnp.asarray(Y)
    layers = {k: jnp.asarray(params[k]) for k in LAYER_KEYS}
    n_layers = layers["gamma"].shape[0]
    if X.shape[-1] != n_layers:
        raise ValueError(f"{n_layers} layers need {n_layers} pilot columns, got {X.shape[-1]}")
    lead = jnp.broadcast_shapes(X.shape[:-2], Y.shape[:-2])
    ntr, nrr = X.shape[-2], Y.shape[-2]
    W0 = jnp.zeros(lead + (ntr, nrr), dtype=complex)
    P0 = jnp.broadcast_to(jnp.eye(ntr, dtype=complex) / delta, lead + (ntr, ntr))
    xs = jnp.moveaxis(X, -1, 0)[..., None]
    ys = jnp.moveaxis(Y, -1, 0)[..., None]

    def body(state, inp):
        lp, x, y = inp
        return cedun_layer(state, x, y, lp), None

    (W, _), _ = jax.lax.scan(body, (W0, P0), (layers, xs, ys))
    return hermitian(W)


def pilot_noise(rng, H, n_pilots):
    """Unit-variance receiver noise for the uplink pilots of a channel batch."""
    return crandn(rng, np.shape(H)[:-1] + (n_pilots,))


def cedun_forward(params, H_eq, H, F_RF, W_RF, sigma2, noise=None, rng=None, P=1.0, delta=1e-2):
    """Synthesize the uplink pilot observations with the network's own
    (power-scaled) pilots and estimate every user's equivalent channel.

    ``noise`` is a unit-variance draw shaped ``(..., K, N_r, L)``; when it is
    omitted it is drawn from ``rng``, and with neither the pilots are
    received noiselessly.
    """
    X = scale_pilots(jnp.asarray(params["pilots"]), P)
    if noise is None and rng is not None:
        noise = pilot_noise(rng, H, X.shape[-1])
    Y = received_pilot(jnp.asarray(H_eq), jnp.asarray(H), jnp.asarray(F_RF), jnp.asarray(W_RF), X,
                       sigma2, noise=None if noise is None else jnp.asarray(noise))
    return cedun_estimate(params, X, Y, delta)
