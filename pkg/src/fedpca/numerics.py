"""Dense linear-algebra kernel.

Matrices are plain ``float64`` numpy arrays (C / row-major order). All
functions are pure: inputs are never modified.
"""
import numpy as np

from .errors import DegenerateFactorizationError, DimensionError

# |R_jj| below RANK_TOL * ||a||_F counts as rank deficient.
RANK_TOL = 1e-12


def as_matrix(a, name="a"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def frobenius_inner(a, b):
    """Return sum_ij a_ij * b_ij."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.vdot(a, b))


def frobenius_norm_sq(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.vdot(a, a))


def thin_qr(a):
    """Thin QR factorization with a strictly positive diagonal in R.

    Returns ``(q, r)`` with ``a = q @ r``, ``q`` of shape (d, k) with
    orthonormal columns and ``r`` upper triangular (k, k). The sign
    convention makes the factorization unique, so identical inputs give
    identical outputs.
    """
    a = as_matrix(a)
    d, k = a.shape
    if d < k:
        raise DimensionError(f"thin_qr needs rows >= cols, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DegenerateFactorizationError("non-finite entries in input")
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.diag(r)
    scale = np.linalg.norm(a)
    if k and (scale == 0.0 or np.min(np.abs(diag)) < RANK_TOL * scale):
        raise DegenerateFactorizationError(
            f"rank-deficient input: min |R_jj| = {np.min(np.abs(diag)):.3e}, "
            f"||a||_F = {scale:.3e}")
    signs = np.where(diag < 0, -1.0, 1.0)
    q = q * signs
    r = r * signs[:, None]
    return q, r


def orthonormalize(a):
    """Q factor of :func:`thin_qr`."""
    return thin_qr(a)[0]


def orthonormality_error(u):
    """||u^T u - I||_F."""
    u = as_matrix(u, "u")
    return float(np.linalg.norm(u.T @ u - np.eye(u.shape[1])))


def truncated_svd(a, k):
    """Leading ``k`` left singular vectors and all singular values of ``a``.

    Returns ``(u_k, sigma)``; ``sigma`` has ``min(d, n)`` entries sorted in
    descending order. Each column of ``u_k`` is sign-normalized so that its
    entry of largest magnitude is positive.
    """
    a = as_matrix(a)
    d, n = a.shape
    if not 1 <= k <= min(d, n):
        raise DimensionError(f"k={k} outside [1, {min(d, n)}] for shape {a.shape}")
    u, sigma, _ = np.linalg.svd(a, full_matrices=False)
    u_k = _fix_signs(u[:, :k])
    return u_k, sigma


def leading_eigvecs(sym, k):
    """Top-``k`` eigenvectors of a symmetric PSD matrix, sign-normalized."""
    sym = as_matrix(sym, "sym")
    if sym.shape[0] != sym.shape[1]:
        raise DimensionError(f"matrix must be square, got {sym.shape}")
    if not 1 <= k <= sym.shape[0]:
        raise DimensionError(f"k={k} outside [1, {sym.shape[0]}]")
    w, v = np.linalg.eigh(0.5 * (sym + sym.T))
    order = np.argsort(w)[::-1][:k]
    return _fix_signs(v[:, order]), w[order]


def _fix_signs(u):
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs
