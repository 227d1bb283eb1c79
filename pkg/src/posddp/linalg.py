"""Small dense linear-algebra helpers used throughout the package.

Covariance matrices are stored as full n x n blocks and vectorized in
column-major (Fortran) order everywhere; `vec`/`unvec` are the only
functions that should encode that convention.
"""

import numpy as np
import scipy.linalg

from .errors import IllConditionedBeliefError


def sym(M):
    """Symmetrize a square matrix."""
    return 0.5 * (M + M.T)


def vec(M):
    """Column-major vectorization of a matrix."""
    return np.asarray(M).reshape(-1, order="F")


def unvec(v, rows, cols=None):
    """Inverse of :func:`vec`."""
    if cols is None:
        cols = rows
    return np.asarray(v).reshape(rows, cols, order="F")


def commutation_matrix(m, n):
    """K such that K @ vec(A) = vec(A.T) for A of shape (m, n)."""
    K = np.zeros((m * n, m * n))
    for i in range(m):
        for j in range(n):
            K[j * m + i, i * n + j] = 1.0
    return K.T


def spd_cholesky(M, name="matrix"):
    """Cholesky of a symmetric matrix with one jitter retry.

    On the first factorization failure a diagonal jitter of
    1e-12 * trace / n is added and the factorization retried once; a second
    failure raises :class:`IllConditionedBeliefError` carrying the condition
    number estimate.
    """
    M = sym(np.asarray(M, dtype=float))
    try:
        return scipy.linalg.cholesky(M, lower=True)
    except scipy.linalg.LinAlgError:
        pass
    n = M.shape[0]
    jitter = 1e-12 * max(np.trace(M), 0.0) / n
    try:
        return scipy.linalg.cholesky(M + jitter * np.eye(n), lower=True)
    except scipy.linalg.LinAlgError:
        cond = float(np.linalg.cond(M))
        raise IllConditionedBeliefError(
            f"{name} is not positive definite (cond ~ {cond:.3e})", cond=cond
        ) from None


def spd_solve(M, B, name="matrix"):
    """Solve M X = B for symmetric positive definite M (with jitter retry)."""
    L = spd_cholesky(M, name=name)
    y = scipy.linalg.solve_triangular(L, B, lower=True)
    return scipy.linalg.solve_triangular(L.T, y, lower=False)


def spd_inverse(M, name="matrix"):
    """Inverse of a symmetric positive definite matrix (with jitter retry)."""
    return sym(spd_solve(M, np.eye(M.shape[0]), name=name))


def psd_sqrt(M):
    """Symmetric PSD square root via eigendecomposition."""
    w, V = np.linalg.eigh(sym(M))
    w = np.clip(w, 0.0, None)
    return sym((V * np.sqrt(w)) @ V.T)


def psd_inv_sqrt(M, name="matrix"):
    """Symmetric inverse square root of a positive definite matrix."""
    w, V = np.linalg.eigh(sym(M))
    if np.min(w) <= 0.0:
        raise IllConditionedBeliefError(
            f"{name} must be positive definite for an inverse square root",
            cond=float(np.max(w) / max(np.min(w), np.finfo(float).tiny)),
        )
    return sym((V / np.sqrt(w)) @ V.T)


def min_eigval(M):
    """Smallest eigenvalue of a symmetric matrix."""
    return float(np.linalg.eigvalsh(sym(M))[0])


def spectral_norm(M):
    """Largest eigenvalue magnitude of a symmetric matrix."""
    return float(np.max(np.abs(np.linalg.eigvalsh(sym(M)))))
