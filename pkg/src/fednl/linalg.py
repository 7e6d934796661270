"""Dense FP64 linear algebra kernels for symmetric d x d matrices.

Conventions used across the project:

* matrices are numpy float64, allocated column-major (Fortran order);
* symmetric matrices are always stored fully, but the packed vector form
  keeps only the upper triangle, enumerated column by column:
  ``(0,0), (0,1), (1,1), (0,2), (1,2), (2,2), ...`` so entry (i, j) with
  i <= j lives at position ``j (j + 1) / 2 + i``;
* solves and eigen decompositions are implemented here, in plain numpy,
  so a run is reproducible bit-for-bit regardless of the host's LAPACK.

All routines treat inputs as they are (no implicit symmetrization); callers
that need an exactly symmetric matrix use :func:`symmetrize_from_upper`.
"""

from __future__ import annotations

import math

import numpy as np


class NotPositiveDefiniteError(Exception):
    """A Cholesky pivot was <= 0 (or not finite)."""

    def __init__(self, pivot_index: int, pivot_value: float):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot_index} "
            f"has value {pivot_value:.6g}"
        )


class EigenConvergenceError(Exception):
    """Jacobi sweeps exhausted before the off-diagonal mass vanished."""


def new_matrix(rows: int, cols: int | None = None) -> np.ndarray:
    """Zero column-major FP64 matrix."""
    return np.zeros((rows, rows if cols is None else cols), order="F")


def new_vector(n: int) -> np.ndarray:
    return np.zeros(n)


def packed_length(d: int) -> int:
    """Number of upper-triangle entries of a d x d matrix."""
    return d * (d + 1) // 2


def upper_tri_index(i: int, j: int) -> int:
    """Packed position of entry (i, j), i <= j, column-wise enumeration."""
    if i > j or i < 0:
        raise ValueError(f"need 0 <= i <= j, got ({i}, {j})")
    return j * (j + 1) // 2 + i


def upper_tri_unpack(t: int) -> tuple[int, int]:
    """Inverse of upper_tri_index: packed position -> (i, j)."""
    if t < 0:
        raise ValueError("negative packed index")
    j = (math.isqrt(8 * t + 1) - 1) // 2
    i = t - j * (j + 1) // 2
    return i, j


_TRI_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def tri_tables(d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rows, cols, weights) of the packed enumeration for dimension d.

    ``weights[t]`` is 1 for diagonal entries and 2 for off-diagonal ones:
    the multiplicity of packed entry t inside the full symmetric matrix.
    Cached per d; treat the returned arrays as read-only.
    """
    hit = _TRI_CACHE.get(d)
    if hit is None:
        cols = np.repeat(np.arange(d), np.arange(1, d + 1))
        t = np.arange(packed_length(d))
        rows = t - cols * (cols + 1) // 2
        weights = np.where(rows == cols, 1.0, 2.0)
        hit = (rows, cols, weights)
        _TRI_CACHE[d] = hit
    return hit


def pack_upper(m: np.ndarray) -> np.ndarray:
    """Upper triangle of a square matrix as a packed vector."""
    d = m.shape[0]
    rows, cols, _ = tri_tables(d)
    return np.ascontiguousarray(m[rows, cols])


def unpack_to_symmetric(packed: np.ndarray, d: int) -> np.ndarray:
    """Symmetric matrix whose upper triangle is the packed vector."""
    if packed.shape != (packed_length(d),):
        raise ValueError("packed length does not match dimension")
    rows, cols, _ = tri_tables(d)
    out = new_matrix(d)
    out[rows, cols] = packed
    out[cols, rows] = packed
    return out


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """a @ x for a rows x cols matrix."""
    return a @ x


def matvec_transposed(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """a.T @ x without materializing the transpose."""
    return a.T @ x


def rank1_accumulate_upper(m: np.ndarray, v: np.ndarray, coeff: float) -> None:
    """m[upper] += coeff * v v^T, touching only the upper triangle."""
    d = m.shape[0]
    rows, cols, _ = tri_tables(d)
    m[rows, cols] += coeff * v[rows] * v[cols]


def symmetrize_from_upper(m: np.ndarray) -> None:
    """Copy the upper triangle onto the lower one, in place."""
    d = m.shape[0]
    rows, cols, _ = tri_tables(d)
    m[cols, rows] = m[rows, cols]


def add_to_diagonal(m: np.ndarray, c: float) -> None:
    """m += c * I in place."""
    d = m.shape[0]
    m[np.arange(d), np.arange(d)] += c


def frobenius_norm_symmetric(m: np.ndarray) -> float:
    """Frobenius norm of a symmetric matrix read from its upper triangle.

    Off-diagonal entries count twice; the lower triangle is never touched,
    so the result is well defined even if only the upper half is current.
    """
    d = m.shape[0]
    rows, cols, weights = tri_tables(d)
    vals = m[rows, cols]
    return math.sqrt(float(np.dot(weights * vals, vals)))


def cholesky_factor(a: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = a, by sequential pivot elimination.

    Each entry is the classic dot-product recurrence
    ``L[i, j] = (a[i, j] - sum_s L[i, s] L[j, s]) / L[j, j]``; pivots are
    produced in index order, and the first non-positive (or non-finite)
    pivot raises :class:`NotPositiveDefiniteError` with its index.
    Only the upper triangle of ``a`` is read.
    """
    d = a.shape[0]
    if a.shape != (d, d):
        raise ValueError("matrix must be square")
    low = new_matrix(d)
    for j in range(d):
        pivot = a[j, j] - np.dot(low[j, :j], low[j, :j])
        if not pivot > 0.0 or not math.isfinite(pivot):
            raise NotPositiveDefiniteError(j, float(pivot))
        ljj = math.sqrt(pivot)
        low[j, j] = ljj
        if j + 1 < d:
            # column j below the pivot; a is read row-wise from its upper half
            low[j + 1 :, j] = (a[j, j + 1 :] - low[j + 1 :, :j] @ low[j, :j]) / ljj
    return low


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b for symmetric positive definite a."""
    low = cholesky_factor(a)
    d = low.shape[0]
    y = new_vector(d)
    for i in range(d):
        y[i] = (b[i] - np.dot(low[i, :i], y[:i])) / low[i, i]
    x = new_vector(d)
    for i in range(d - 1, -1, -1):
        x[i] = (y[i] - np.dot(low[i + 1 :, i], x[i + 1 :])) / low[i, i]
    return x


def jacobi_eigh(
    a: np.ndarray, max_sweeps: int = 30, tol_factor: float = 1e-12
) -> tuple[np.ndarray, np.ndarray]:
    """Eigen decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with a = V diag(w) V^T (columns of V
    are eigenvectors, not sorted).  Sweeps stop when the off-diagonal
    Frobenius mass falls below ``tol_factor * ||a||_F``; exhausting
    ``max_sweeps`` first raises :class:`EigenConvergenceError`.
    """
    d = a.shape[0]
    if a.shape != (d, d):
        raise ValueError("matrix must be square")
    work = np.array(a, order="F", copy=True)
    vecs = np.eye(d, order="F")
    norm = frobenius_norm_symmetric(work)
    thresh = tol_factor * norm
    if d == 1 or norm == 0.0:
        return np.diag(work).copy(), vecs

    def offdiag_mass() -> float:
        rows, cols, _ = tri_tables(d)
        off = work[rows, cols][rows != cols]
        return math.sqrt(2.0 * float(np.dot(off, off)))

    for _ in range(max_sweeps):
        if offdiag_mass() <= thresh:
            return np.diag(work).copy(), vecs
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = work[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(theta * theta + 1.0)
                )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = work[p, :].copy()
                rq = work[q, :].copy()
                work[p, :] = c * rp - s * rq
                work[q, :] = s * rp + c * rq
                cp = work[:, p].copy()
                cq = work[:, q].copy()
                work[:, p] = c * cp - s * cq
                work[:, q] = s * cp + c * cq
                work[p, q] = 0.0
                work[q, p] = 0.0
                vp = vecs[:, p].copy()
                vq = vecs[:, q].copy()
                vecs[:, p] = c * vp - s * vq
                vecs[:, q] = s * vp + c * vq
    if offdiag_mass() <= thresh:
        return np.diag(work).copy(), vecs
    raise EigenConvergenceError(
        f"Jacobi did not converge in {max_sweeps} sweeps (dim {d})"
    )


def eigen_clamp_min(a: np.ndarray, floor: float) -> np.ndarray:
    """Nearest symmetric matrix with all eigenvalues >= floor.

    Decomposes ``a`` (symmetric), lifts eigenvalues below ``floor`` up to it,
    and rebuilds.  The result is exactly symmetric.
    """
    vals, vecs = jacobi_eigh(a)
    clamped = np.maximum(vals, floor)
    out = np.asfortranarray((vecs * clamped) @ vecs.T)
    symmetrize_from_upper(out)
    return out
