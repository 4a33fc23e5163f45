"""Dense tensors, SPD solves, covariance estimation, and tensor file IO.

Tensors are plain float64 C-contiguous numpy arrays (row-major data plus a
shape, which is exactly the on-disk contract). Heavy lifting is delegated to
numpy/scipy; this module owns the contracts: shape checking, the error
taxonomy, and the binary serialization format shared by every other module.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    CorruptionError,
    FormatError,
    InsufficientDataError,
    MissingClassError,
    ShapeError,
    SingularMatrixError,
)

MAGIC = b"OODT"
FORMAT_VERSION = 1

_MAX_RANK = 32
_MAX_ELEMENTS = 1 << 30


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce to a float64 C-contiguous array, optionally reshaping."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    # ascontiguousarray would silently promote rank-0 arrays to rank 1
    return np.ascontiguousarray(arr) if arr.ndim else arr


def save_tensor(path, arr: np.ndarray) -> None:
    """Write a tensor in the shared binary format.

    Layout (little-endian): magic "OODT", u32 version, u32 rank,
    rank x u64 extents, then raw float64 values in row-major order.
    """
    arr = as_tensor(arr)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a tensor written by save_tensor.

    Raises FormatError on bad magic/version/extents and CorruptionError when
    the payload size does not match the header.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CorruptionError(f"{path}: file shorter than the fixed header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rank > _MAX_RANK:
        raise FormatError(f"{path}: implausible rank {rank}")
    header_end = 12 + 8 * rank
    if len(blob) < header_end:
        raise CorruptionError(f"{path}: truncated extent table")
    shape = struct.unpack_from(f"<{rank}Q", blob, 12)
    if any(e == 0 for e in shape):
        raise FormatError(f"{path}: zero extent in shape {shape}")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if count > _MAX_ELEMENTS:
        raise FormatError(f"{path}: implausible element count {count}")
    expected = header_end + 8 * count
    if len(blob) < expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes, file has {len(blob)}"
        )
    if len(blob) > expected:
        raise CorruptionError(f"{path}: {len(blob) - expected} trailing bytes")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=header_end)
    return data.astype(np.float64).reshape(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors with explicit shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SpdFactor:
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix."""

    dim: int
    lower: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def default_ridge(m: np.ndarray) -> float:
    """Default diagonal loading for detector covariance factorization.

    Scales with the mean diagonal of the matrix, floored so an exactly zero
    covariance (one sample per class) still factors.
    """
    m = np.asarray(m)
    return max(1e-6 * float(np.trace(m)) / m.shape[0], 1e-12)


def _cholesky_scan(a: np.ndarray):
    """Column-by-column factorization; returns (L, None) or (None, bad pivot)."""
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if not np.isfinite(pivot) or pivot <= 0.0:
            return None, j
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower, None


def spd_factor(m: np.ndarray, ridge: float = 0.0) -> SpdFactor:
    """Factor (m + ridge*I) as L L^T.

    m must be square and symmetric within 1e-9. On failure the factorization
    is re-run column by column to name the failing pivot.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"spd_factor needs a square matrix, got {m.shape}")
    if ridge < 0.0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    if m.size and float(np.max(np.abs(m - m.T))) > 1e-9:
        raise ValueError("matrix is not symmetric within 1e-9")
    a = 0.5 * (m + m.T)
    if ridge:
        a = a + ridge * np.eye(m.shape[0])
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        lower, bad = _cholesky_scan(a)
        if lower is None:
            raise SingularMatrixError(bad) from None
    return SpdFactor(dim=m.shape[0], lower=lower)


def spd_solve(f: SpdFactor, v: np.ndarray) -> np.ndarray:
    """Solve (L L^T) w = v by forward and back substitution.

    v may be rank-1 (length dim) or rank-2 (dim x m, solved column-wise).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != f.dim:
        raise ShapeError(f"rhs length {v.shape[0]} != factor dim {f.dim}")
    y = solve_triangular(f.lower, v, lower=True, check_finite=False)
    return solve_triangular(f.lower.T, y, lower=False, check_finite=False)


def class_stats(features, labels, num_classes: int):
    """Per-class means and the tied covariance of centered residuals.

    The covariance is normalized by the total sample count N and shared by
    all classes: (1/N) sum_c sum_{i in c} (f_i - mu_c)(f_i - mu_c)^T.

    Returns (means, tied_cov) with means shaped (num_classes, d).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.ndim != 2:
        raise ShapeError(f"features must be rank-2 (N, d), got {feats.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, d = feats.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} samples")
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    means = np.zeros((num_classes, d))
    centered = np.empty_like(feats)
    for c in range(num_classes):
        mask = labels == c
        if not mask.any():
            raise MissingClassError(c)
        means[c] = feats[mask].mean(axis=0)
        centered[mask] = feats[mask] - means[c]
    cov = (centered.T @ centered) / n
    cov = 0.5 * (cov + cov.T)
    return means, cov
