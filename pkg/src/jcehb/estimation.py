"""Least-squares and recursive least-squares estimation of the equivalent
channel from pilot observations ``Y = H X + noise``.

Functions broadcast over leading batch axes of ``X`` and ``Y``.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import SingularGram
from .numerics import crandn, hermitian

DEFAULT_BETA = 0.99
DEFAULT_DELTA = 1e-2
GRAM_COND_MAX = 1e12


@dataclass(frozen=True)
class RlsState:
    """Iterate of the RLS recursion.

    ``W`` is the transposed-conjugate estimate (``H_hat = W^H``), ``P_mat``
    the inverse-correlation surrogate, ``e`` the last a-priori residual.
    """
    W: np.ndarray
    P_mat: np.ndarray
    beta: float
    delta: float
    n: int = 0
    e: np.ndarray = None

    @classmethod
    def initial(cls, n_tx_rf, n_rx_rf, beta=DEFAULT_BETA, delta=DEFAULT_DELTA, batch_shape=()):
        W = np.zeros(tuple(batch_shape) + (n_tx_rf, n_rx_rf), dtype=np.complex128)
        P = np.broadcast_to(np.eye(n_tx_rf, dtype=np.complex128) / delta,
                            tuple(batch_shape) + (n_tx_rf, n_tx_rf)).copy()
        return cls(W=W, P_mat=P, beta=beta, delta=delta)

    @property
    def estimate(self):
        return hermitian(self.W)


def ls_estimate(Y, X, cond_max=GRAM_COND_MAX):
    """``Y X^H (X X^H)^{-1}``; raises ``SingularGram`` for ill-conditioned X."""
    Y = np.asarray(Y)
    X = np.asarray(X)
    gram = X @ hermitian(X)
    if np.any(np.linalg.cond(gram) > cond_max):
        raise SingularGram("X X^H is numerically singular")
    # (Y X^H) G^{-1} = (G^{-H} (Y X^H)^H)^H and G is Hermitian
    return hermitian(np.linalg.solve(gram, hermitian(Y @ hermitian(X))))


def rls_step(state, x, y, eps=1e-300):
    """One pass of the five RLS updates for pilot column ``x`` and
    observation column ``y`` (shapes ``(..., N_t_rf)`` and ``(..., N_r_rf)``).
    """
    x = np.asarray(x)[..., :, None]
    y = np.asarray(y)[..., :, None]
    beta = state.beta
    g = state.P_mat @ x
    den = beta + hermitian(g) @ x
    den = np.where(np.abs(den) < eps, eps, den)
    v = g / den
    P = (state.P_mat - v @ hermitian(g)) / beta
    e = y - hermitian(state.W) @ x
    W = state.W + v @ hermitian(e)
    return replace(state, W=W, P_mat=P, n=state.n + 1, e=e[..., 0])


def rls_estimate(X, Y, beta=DEFAULT_BETA, delta=DEFAULT_DELTA, return_residuals=False):
    """Run the recursion over all ``L`` pilot columns and return ``W^H``.

    With ``return_residuals`` the per-step residual norms are returned as a
    second value, shape ``(..., L)``.
    """
    X = np.asarray(X)
    Y = np.asarray(Y)
    if X.shape[-1] != Y.shape[-1]:
        raise ValueError("X and Y need the same number of columns")
    state = RlsState.initial(X.shape[-2], Y.shape[-2], beta, delta, X.shape[:-2])
    res = []
    for n in range(X.shape[-1]):
        state = rls_step(state, X[..., n], Y[..., n])
        res.append(np.linalg.norm(state.e, axis=-1))
    if return_residuals:
        out = np.stack(res, axis=-1) if res else np.zeros(X.shape[:-2] + (0,))
        return state.estimate, out
    return state.estimate


def orthogonal_pilots(K, n_tx_rf, length, P=1.0):
    """Rows of a unitary DFT matrix, disjoint across users, so that
    ``X_k X_u^H = 0`` for ``k != u``. Every column has power exactly ``P``.
    Needs ``K * n_tx_rf <= length``."""
    if K * n_tx_rf > length:
        raise ValueError(f"orthogonal pilots need length >= K*N_t_rf = {K * n_tx_rf}")
    n = np.arange(length)
    dft = np.exp(-2j * np.pi * np.outer(n, n) / length)
    rows = dft[:K * n_tx_rf].reshape(K, n_tx_rf, length)
    return rows * np.sqrt(P / n_tx_rf)


def default_pilots(rng, K, n_tx_rf, length, P=1.0):
    """Orthogonal pilots when they fit, random unit-power ones otherwise."""
    if K * n_tx_rf <= length:
        return orthogonal_pilots(K, n_tx_rf, length, P)
    return random_pilots(rng, n_tx_rf, length, P, lead=(K,))


def random_pilots(rng, n_tx_rf, length, P=1.0, lead=()):
    """Gaussian pilot columns rescaled to power exactly ``P``."""
    X = crandn(rng, tuple(lead) + (n_tx_rf, length))
    norms = np.linalg.norm(X, axis=-2, keepdims=True)
    return X * np.sqrt(P) / norms
