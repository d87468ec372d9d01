"""Centralized PCA and reconstruction errors.

Model checkpoint layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"FPCAMDL1"
    8       4     d (uint32)
    12      4     k (uint32)
    16      32    feature-manifest SHA-256 digest (all zero if unknown)
    48      8*d*k basis entries, float64 little-endian, column-major

The round trip is lossless.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, DimensionError
from .grassmann import GrassmannPoint
from .numerics import as_matrix, truncated_svd

MODEL_MAGIC = b"FPCAMDL1"
_HEADER = struct.Struct("<8sII32s")


@dataclass(frozen=True, eq=False)
class PcaModel:
    basis: GrassmannPoint
    manifest_digest: bytes = bytes(32)

    def __post_init__(self):
        if len(self.manifest_digest) != 32:
            raise ValueError("manifest digest must be 32 bytes")

    @property
    def feature_dim(self):
        return self.basis.shape[0]

    @property
    def k(self):
        return self.basis.shape[1]

    @property
    def components(self):
        return self.basis.basis

    @classmethod
    def from_basis(cls, u, manifest_digest=bytes(32)):
        return cls(GrassmannPoint(u), manifest_digest)


def fit_centralized(x, k, manifest_digest=bytes(32)):
    """Rank-k PCA of a d x n data matrix (columns are records).

    The data are not re-centered; callers normalize upstream.
    """
    x = as_matrix(x, "x")
    d, n = x.shape
    if not 0 < k < d:
        raise DimensionError(f"need 0 < k < d, got k={k}, d={d}")
    if k > n:
        raise DimensionError(f"need k <= n, got k={k}, n={n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("data matrix has non-finite entries")
    u_k, _ = truncated_svd(x, k)
    return PcaModel.from_basis(u_k, manifest_digest)


def reconstruction_error(model, record):
    """Squared residual ||x - U U^T x||^2 of a single record."""
    x = np.asarray(record, dtype=np.float64)
    if x.shape != (model.feature_dim,):
        raise DimensionError(f"record has shape {x.shape}, model expects ({model.feature_dim},)")
    r = x - model.components @ (model.components.T @ x)
    return float(r @ r)


def batch_errors(model, x):
    """Reconstruction error of every column of a d x n matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros(0)
    x = as_matrix(x, "x")
    if x.shape[0] != model.feature_dim:
        raise DimensionError(f"data has {x.shape[0]} rows, model expects {model.feature_dim}")
    u = model.components
    r = x - u @ (u.T @ x)
    return np.einsum("ij,ij->j", r, r)


def residual(model, x):
    """||(I - U U^T) X||_F^2."""
    return float(np.sum(batch_errors(model, x)))


def model_to_bytes(model):
    d, k = model.basis.shape
    head = _HEADER.pack(MODEL_MAGIC, d, k, model.manifest_digest)
    return head + model.components.astype("<f8").tobytes(order="F")


def model_from_bytes(blob):
    if len(blob) < _HEADER.size:
        raise DataFormatError("model file truncated")
    magic, d, k, digest = _HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise DataFormatError(f"bad model magic {magic!r}")
    body = blob[_HEADER.size:]
    if len(body) != 8 * d * k:
        raise DataFormatError(f"model body has {len(body)} bytes, expected {8 * d * k}")
    u = np.frombuffer(body, dtype="<f8").reshape((d, k), order="F").astype(np.float64)
    return PcaModel(GrassmannPoint(u), digest)


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
