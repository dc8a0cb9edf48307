"""Complex-matrix helpers, seeded random streams and the diagonal operators
used by the unfolded inversion approximation.

Every function here accepts either NumPy arrays or JAX arrays (including
tracers inside ``jax.jit``) and returns the same kind. Matrices may carry
arbitrary leading batch dimensions; the last two axes are the matrix axes.
"""

import numpy as np
import jax
import jax.numpy as jnp

from .errors import DegenerateDiagonal, DimensionMismatch, NonFiniteValue

EPS_DIAG = 1e-12


def xp_of(*arrays):
    """Return ``jax.numpy`` if any argument is a JAX array, else ``numpy``."""
    for a in arrays:
        if isinstance(a, jax.Array):
            return jnp
    return np


def is_concrete(a):
    return not isinstance(a, jax.core.Tracer)


def hermitian(a):
    """Conjugate transpose over the last two axes."""
    return a.conj().swapaxes(-1, -2)


def cmatrix(data, rows=None, cols=None):
    """Validate and return a finite complex128 matrix.

    Parameters
    ----------
    data : array_like
        Two-dimensional data (a 1-D input is treated as a column).
    rows, cols : int, optional
        Expected shape; ``DimensionMismatch`` is raised on disagreement.
    """
    m = np.asarray(data, dtype=np.complex128)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionMismatch(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionMismatch(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteValue("matrix contains NaN or Inf entries")
    return m


def _check_square(a):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch(f"expected square matrices, got shape {a.shape}")


# -- random streams ---------------------------------------------------------

def make_rng(seed):
    """PCG64 generator; identical seeds give identical draws everywhere."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def substream(seed, *keys):
    """Independent generator derived from ``seed`` and integer ``keys``.

    Used to give every task (user, batch, sweep point) its own stream
    without sharing a generator.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def crandn(rng, shape, var=1.0):
    """Circularly-symmetric complex Gaussian samples with variance ``var``."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * np.sqrt(var / 2.0)


# -- inversion approximation ------------------------------------------------

def diag_inv_plus(a, eps=EPS_DIAG):
    """Keep only the diagonal of ``a`` and take its element-wise reciprocal.

    Raises ``DegenerateDiagonal`` when any diagonal modulus is ``<= eps``
    (checked for concrete inputs only; traced values cannot raise).
    """
    xp = xp_of(a)
    _check_square(a)
    d = xp.diagonal(a, axis1=-2, axis2=-1)
    if is_concrete(d) and np.any(np.abs(np.asarray(d)) <= eps):
        raise DegenerateDiagonal(f"diagonal entry with modulus <= {eps}")
    n = a.shape[-1]
    return xp.eye(n, dtype=a.dtype) * (1.0 / d)[..., None, :]


def zero_diag_imag(d):
    """Drop the imaginary part of the diagonal; off-diagonals untouched."""
    xp = xp_of(d)
    _check_square(d)
    n = d.shape[-1]
    mask = xp.eye(n, dtype=bool)
    return xp.where(mask, d.real.astype(d.dtype), d)


def approx_inverse(a, b, d, eps=EPS_DIAG):
    """``diag_inv_plus(a) @ b + zero_diag_imag(d)``."""
    _check_square(b)
    _check_square(d)
    if not (a.shape[-1] == b.shape[-1] == d.shape[-1]):
        raise DimensionMismatch("A, B and D must have equal size")
    return diag_inv_plus(a, eps) @ b + zero_diag_imag(d)


# -- exact inverse (oracle) -------------------------------------------------

def gauss_inverse(a):
    """Inverse by Gauss-Jordan elimination with partial pivoting.

    Pure NumPy and deliberately independent of LAPACK; it serves as the
    reference inverse in tests. Leading batch dimensions are looped over.
    """
    a = np.asarray(a, dtype=np.complex128)
    _check_square(a)
    if a.ndim > 2:
        out = np.empty_like(a)
        for idx in np.ndindex(a.shape[:-2]):
            out[idx] = gauss_inverse(a[idx])
        return out
    n = a.shape[0]
    aug = np.concatenate([a.copy(), np.eye(n, dtype=np.complex128)], axis=1)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        if np.abs(aug[piv, col]) == 0.0:
            raise np.linalg.LinAlgError("singular matrix")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] -= aug[row, col] * aug[col]
    return aug[:, n:]
