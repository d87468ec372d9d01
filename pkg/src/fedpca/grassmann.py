"""Points, tangent vectors and the QR retraction on the Grassmann manifold.

A point is represented by one d x k basis with orthonormal columns; two
points describe the same subspace iff all their principal angles vanish.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFactorizationError, DegenerateStepError, DimensionError
from .numerics import as_matrix, orthonormality_error, thin_qr

ORTHO_TOL = 1e-8
TANGENT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class GrassmannPoint:
    basis: np.ndarray

    def __post_init__(self):
        basis = as_matrix(self.basis, "basis")
        d, k = basis.shape
        if not d > k > 0:
            raise DimensionError(f"need d > k > 0, got d={d}, k={k}")
        err = orthonormality_error(basis)
        if not err <= ORTHO_TOL:
            raise ValueError(f"basis is not orthonormal: ||U^T U - I||_F = {err:.3e}")
        basis = basis.copy()
        basis.flags.writeable = False
        object.__setattr__(self, "basis", basis)

    @classmethod
    def from_matrix(cls, a):
        """Orthonormalize an arbitrary full-rank d x k matrix."""
        return cls(thin_qr(a)[0])

    @property
    def shape(self):
        return self.basis.shape

    def projector(self):
        return self.basis @ self.basis.T


@dataclass(frozen=True, eq=False)
class TangentVector:
    delta: np.ndarray
    at: GrassmannPoint

    def __post_init__(self):
        delta = as_matrix(self.delta, "delta")
        if delta.shape != self.at.shape:
            raise DimensionError(f"delta shape {delta.shape} != point shape {self.at.shape}")
        scale = max(1.0, float(np.linalg.norm(delta)))
        off = float(np.linalg.norm(self.at.basis.T @ delta))
        if not off <= TANGENT_TOL * scale:
            raise ValueError(f"not tangent: ||A^T delta||_F = {off:.3e}")
        object.__setattr__(self, "delta", delta)


def project_to_tangent(p, euclid_grad):
    """Orthogonal projection (I_d - p p^T) g of a Euclidean gradient."""
    g = as_matrix(euclid_grad, "euclid_grad")
    if g.shape != p.shape:
        raise DimensionError(f"gradient shape {g.shape} != point shape {p.shape}")
    u = p.basis
    delta = g - u @ (u.T @ g)
    return TangentVector(delta, p)


def retract(p, v, step):
    """QR retraction of the step ``p - step * v``.

    ``step == 0`` or ``v == 0`` returns ``p`` itself.
    """
    if v.at is not p and not np.array_equal(v.at.basis, p.basis):
        raise ValueError("tangent vector is attached to a different point")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step == 0 or not np.any(v.delta):
        return p
    try:
        q, _ = thin_qr(p.basis - step * v.delta)
    except DegenerateFactorizationError as exc:
        raise DegenerateStepError(f"retraction with step {step:g} collapsed: {exc}") from exc
    return GrassmannPoint(q)


def principal_angles(p, q):
    """Principal angles (radians, ascending) between span(p) and span(q).

    Cosines come from the singular values of p^T q and sines from those of
    (I - p p^T) q; pairing them through arctan2 keeps small angles accurate.
    """
    a = p.basis if isinstance(p, GrassmannPoint) else as_matrix(p)
    b = q.basis if isinstance(q, GrassmannPoint) else as_matrix(q)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    cos = np.clip(np.linalg.svd(a.T @ b, compute_uv=False), 0.0, 1.0)
    sin = np.clip(np.linalg.svd(b - a @ (a.T @ b), compute_uv=False), 0.0, 1.0)
    # cos is descending, sin ascending: both index the angles smallest-first
    return np.arctan2(np.sort(sin), np.sort(cos)[::-1])
