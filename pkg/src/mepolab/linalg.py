"""Dense linear-algebra kernels: regularized Cholesky, triangular solves,
and sample covariance.

Matrices are 2-D float64 numpy arrays in row-major order, vectors are 1-D
arrays. Everything here is a pure function of its inputs; returned arrays
are fresh and safe to share. Matrices serialize to a portable text layout:
a ``rows cols`` header line followed by one whitespace-separated row per
line, each value printed with 17 significant digits so float64 round-trips
exactly.
"""

from __future__ import annotations

from typing import IO

import numpy as np

from .errors import (
    DimensionMismatchError,
    NotPositiveDefiniteError,
    NotSquareError,
    NotSymmetricError,
    SingularDiagonalError,
    TooFewRowsError,
)

# Relative tolerance for the symmetry precheck in `cholesky`.
SYMMETRY_RTOL = 1e-10

# Default diagonal regularizer added before factorization.
DEFAULT_EPSILON = 1e-4


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    try:
        m = np.asarray(a, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatchError(f"{name}: ragged input ({exc})") from exc
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _require_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def cholesky(sigma, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Lower-triangular L with ``L @ L.T == sigma + epsilon * I``.

    Row-oriented Cholesky in double precision. The input must be square and
    symmetric within ``SYMMETRY_RTOL`` (it is symmetrized as ``(S + S.T)/2``
    first, absorbing accumulation-order noise); ``epsilon`` is added to the
    diagonal before factorization. A pivot <= 0 raises
    ``NotPositiveDefiniteError``, which callers handle by raising epsilon or
    falling back.
    """
    s = _as_matrix(sigma, "sigma")
    n, m = s.shape
    if n != m:
        raise NotSquareError(f"expected square matrix, got {n}x{m}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    _require_finite(s, "sigma")
    scale = float(np.abs(s).max()) if s.size else 0.0
    if scale > 0.0 and float(np.abs(s - s.T).max()) > SYMMETRY_RTOL * scale:
        raise NotSymmetricError("matrix is not symmetric within 1e-10 relative tolerance")

    a = (s + s.T) / 2.0
    a[np.diag_indices(n)] += epsilon
    low = np.zeros_like(a)
    for i in range(n):
        for j in range(i):
            low[i, j] = (a[i, j] - low[i, :j] @ low[j, :j]) / low[j, j]
        pivot = a[i, i] - low[i, :i] @ low[i, :i]
        if pivot <= 0.0:
            raise NotPositiveDefiniteError(
                f"pivot {pivot:.3e} at row {i}; matrix + {epsilon:g}*I is not positive definite"
            )
        low[i, i] = np.sqrt(pivot)
    _require_finite(low, "cholesky factor")
    return low


def solve_lower_triangular(l, b) -> np.ndarray:
    """Solve ``l @ x = b`` by forward substitution.

    ``l`` must be lower triangular with nonzero diagonal (entries above the
    diagonal are ignored). ``b`` may be a vector or a matrix of right-hand
    sides; the result has the same shape as ``b``.
    """
    lm = _as_matrix(l, "l")
    n, m = lm.shape
    if n != m:
        raise NotSquareError(f"expected square matrix, got {n}x{m}")
    bm = np.asarray(b, dtype=np.float64)
    vector = bm.ndim == 1
    if vector:
        bm = bm[:, None]
    if bm.ndim != 2 or bm.shape[0] != n:
        raise DimensionMismatchError(f"rhs rows {bm.shape} do not match matrix size {n}")
    _require_finite(lm, "l")
    _require_finite(bm, "b")
    diag = np.diag(lm)
    if np.any(diag == 0.0):
        raise SingularDiagonalError("zero entry on the diagonal")
    x = np.zeros_like(bm)
    for i in range(n):
        x[i] = (bm[i] - lm[i, :i] @ x[:i]) / diag[i]
    _require_finite(x, "solution")
    return x[:, 0] if vector else x


def solve_upper_triangular(u, b) -> np.ndarray:
    """Solve ``u @ x = b`` by back substitution (mirror of the lower solve)."""
    um = _as_matrix(u, "u")
    n, m = um.shape
    if n != m:
        raise NotSquareError(f"expected square matrix, got {n}x{m}")
    bm = np.asarray(b, dtype=np.float64)
    vector = bm.ndim == 1
    if vector:
        bm = bm[:, None]
    if bm.ndim != 2 or bm.shape[0] != n:
        raise DimensionMismatchError(f"rhs rows {bm.shape} do not match matrix size {n}")
    _require_finite(um, "u")
    _require_finite(bm, "b")
    diag = np.diag(um)
    if np.any(diag == 0.0):
        raise SingularDiagonalError("zero entry on the diagonal")
    x = np.zeros_like(bm)
    for i in range(n - 1, -1, -1):
        x[i] = (bm[i] - um[i, i + 1 :] @ x[i + 1 :]) / diag[i]
    _require_finite(x, "solution")
    return x[:, 0] if vector else x


def sample_covariance(rows) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic mean and unbiased covariance (N-1 denominator) of rows.

    Accepts an ``(n, d)`` array or a sequence of equal-length vectors.
    Requires at least two rows; returns a symmetric PSD matrix.
    """
    x = _as_matrix(rows, "rows")
    n, _ = x.shape
    if n < 2:
        raise TooFewRowsError(f"need at least 2 rows, got {n}")
    _require_finite(x, "rows")
    mean = x.mean(axis=0)
    dev = x - mean
    cov = dev.T @ dev / (n - 1)
    cov = (cov + cov.T) / 2.0
    return mean, cov


def write_matrix(fh: IO[str], m: np.ndarray) -> None:
    """Write one matrix (or a vector, as a single row) in the text layout."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionMismatchError(f"can only serialize 1-D/2-D arrays, got {a.ndim}-D")
    fh.write(f"{a.shape[0]} {a.shape[1]}\n")
    for row in a:
        fh.write(" ".join(f"{v:.17g}" for v in row))
        fh.write("\n")


def read_matrix(fh: IO[str]) -> np.ndarray:
    """Read one matrix written by `write_matrix` from an open text stream."""
    header = fh.readline()
    if not header:
        raise ValueError("unexpected end of stream while reading matrix header")
    parts = header.split()
    if len(parts) != 2:
        raise ValueError(f"bad matrix header: {header!r}")
    rows, cols = int(parts[0]), int(parts[1])
    out = np.empty((rows, cols), dtype=np.float64)
    for i in range(rows):
        line = fh.readline()
        values = line.split()
        if len(values) != cols:
            raise ValueError(f"row {i} has {len(values)} values, expected {cols}")
        out[i] = [float(v) for v in values]
    return out


def save_matrix(m: np.ndarray, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        write_matrix(fh, m)


def load_matrix(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        return read_matrix(fh)
