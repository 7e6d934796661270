"""Dense symmetric kernel tests against numpy and hand-worked references."""

from __future__ import annotations

import math

import numpy as np
import pytest

from fednl import linalg
from fednl.linalg import (
    EigenConvergenceError,
    NotPositiveDefiniteError,
    add_to_diagonal,
    cholesky_factor,
    cholesky_solve,
    eigen_clamp_min,
    frobenius_norm_symmetric,
    jacobi_eigh,
    new_matrix,
    new_vector,
    pack_upper,
    packed_length,
    rank1_accumulate_upper,
    symmetrize_from_upper,
    tri_tables,
    unpack_to_symmetric,
    upper_tri_index,
    upper_tri_unpack,
)


def random_symmetric(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    return np.asfortranarray((a + a.T) / 2.0)


def random_spd(d, seed):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((d, d))
    return np.asfortranarray(b @ b.T + np.eye(d))


# ---------------------------------------------------------------- indexing


def test_packed_length():
    assert [packed_length(d) for d in (1, 2, 3, 301)] == [1, 3, 6, 45451]


def test_upper_tri_index_examples():
    # column-wise upper triangle: (0,0)=0, (0,1)=1, (1,1)=2, (0,2)=3 ...
    assert upper_tri_index(0, 0) == 0
    assert upper_tri_index(0, 1) == 1
    assert upper_tri_index(1, 1) == 2
    assert upper_tri_index(0, 2) == 3
    assert upper_tri_unpack(4) == (1, 2)


@pytest.mark.parametrize("d", [1, 2, 3, 7, 64, 512])
def test_pack_unpack_bijection(d):
    w = packed_length(d)
    ts = np.arange(w)
    rows, cols, _ = tri_tables(d)
    # tables agree with the scalar maps
    for t in (0, w // 2, w - 1):
        i, j = upper_tri_unpack(t)
        assert (rows[t], cols[t]) == (i, j)
        assert upper_tri_index(i, j) == t
    # vectorized bijection
    packed = cols * (cols + 1) // 2 + rows
    assert np.array_equal(packed, ts)


def test_tri_tables_weights():
    _, _, wts = tri_tables(3)
    # diagonal entries (t = 0, 2, 5) weight 1, off-diagonal weight 2
    assert wts[0] == 1.0 and wts[2] == 1.0 and wts[5] == 1.0
    assert wts[1] == 2.0 and wts[3] == 2.0 and wts[4] == 2.0


def test_pack_then_unpack_roundtrip():
    m = random_symmetric(9, 1)
    out = unpack_to_symmetric(pack_upper(m), 9)
    assert np.array_equal(out, m)
    with pytest.raises(ValueError):
        unpack_to_symmetric(pack_upper(m), 8)


# ------------------------------------------------------------ accumulation


def test_rank1_accumulate_matches_triple_loop():
    for d in (1, 2, 5, 8):
        rng = np.random.default_rng(d)
        m = new_matrix(d)
        ref = np.zeros((d, d))
        for _ in range(6):
            v = rng.standard_normal(d)
            c = float(rng.standard_normal())
            rank1_accumulate_upper(m, v, c)
            for i in range(d):
                for j in range(d):
                    ref[i, j] += c * v[i] * v[j]
        symmetrize_from_upper(m)
        assert np.allclose(m, ref, rtol=0, atol=1e-12)


def test_symmetrize_from_upper_overwrites_lower():
    m = new_matrix(3)
    m[0, 1], m[0, 2], m[1, 2] = 4.0, 5.0, 6.0
    m[1, 0], m[2, 0], m[2, 1] = -1.0, -1.0, -1.0  # stale garbage below
    symmetrize_from_upper(m)
    assert m[1, 0] == 4.0 and m[2, 0] == 5.0 and m[2, 1] == 6.0


def test_add_to_diagonal():
    m = random_symmetric(4, 3)
    ref = m + 2.5 * np.eye(4)
    add_to_diagonal(m, 2.5)
    assert np.array_equal(m, ref)


def test_frobenius_norm_symmetric_vs_naive():
    for d in (1, 3, 10, 40):
        m = random_symmetric(d, d + 100)
        got = frobenius_norm_symmetric(m)
        want = float(np.linalg.norm(m, "fro"))
        assert got == pytest.approx(want, rel=1e-14)


def test_frobenius_reads_only_upper_half():
    m = random_symmetric(5, 8)
    want = float(np.linalg.norm(m, "fro"))
    m[np.tril_indices(5, -1)] = 1e9  # junk below the diagonal
    assert frobenius_norm_symmetric(m) == pytest.approx(want, rel=1e-14)


def test_matvec_helpers():
    a = np.asfortranarray(np.random.default_rng(0).standard_normal((4, 6)))
    x6 = np.random.default_rng(1).standard_normal(6)
    x4 = np.random.default_rng(2).standard_normal(4)
    assert np.array_equal(linalg.matvec(a, x6), a @ x6)
    assert np.array_equal(linalg.matvec_transposed(a, x4), a.T @ x4)


# --------------------------------------------------------------- cholesky


def test_cholesky_hand_case():
    a = np.asfortranarray([[4.0, 2.0], [2.0, 5.0]])
    low = cholesky_factor(a)
    assert np.allclose(low, [[2.0, 0.0], [1.0, 2.0]], rtol=0, atol=1e-15)


def test_cholesky_indefinite_raises_with_pivot():
    a = np.asfortranarray([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError) as exc:
        cholesky_factor(a)
    assert exc.value.pivot_index == 1
    assert exc.value.pivot_value == pytest.approx(-3.0)


def test_cholesky_rejects_nonfinite_pivot():
    a = np.asfortranarray([[np.nan, 0.0], [0.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_factor(a)


def test_cholesky_ignores_lower_triangle():
    a = np.asfortranarray([[4.0, 2.0], [999.0, 5.0]])
    low = cholesky_factor(a)
    assert np.allclose(low, [[2.0, 0.0], [1.0, 2.0]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("d", [1, 2, 10, 50, 301])
def test_cholesky_solve_residual(d):
    a = random_spd(d, d)
    rng = np.random.default_rng(d + 7)
    b = rng.standard_normal(d)
    x = cholesky_solve(a, b)
    residual = np.linalg.norm(a @ x - b) / max(1.0, np.linalg.norm(b))
    assert residual <= 1e-10


# ------------------------------------------------------------- eigenvalue


@pytest.mark.parametrize("d", [1, 2, 5, 20, 60])
def test_jacobi_matches_numpy_eigenvalues(d):
    m = random_symmetric(d, d + 11)
    vals, vecs = jacobi_eigh(m.copy(order="F"))
    ref = np.linalg.eigvalsh(m)
    assert np.allclose(np.sort(vals), ref, rtol=0, atol=1e-10 * max(1.0, np.abs(ref).max()))
    # reconstruction: V diag(vals) V^T == m
    rebuilt = (vecs * vals) @ vecs.T
    assert np.allclose(rebuilt, m, rtol=0, atol=1e-10 * max(1.0, np.abs(m).max()))
    # orthonormal columns
    assert np.allclose(vecs.T @ vecs, np.eye(d), rtol=0, atol=1e-12)


def test_eigen_clamp_min_matches_numpy_projection():
    m = random_symmetric(12, 77)
    floor = 0.5
    got = eigen_clamp_min(m, floor)
    vals, vecs = np.linalg.eigh(m)
    want = (vecs * np.maximum(vals, floor)) @ vecs.T
    assert np.allclose(got, want, rtol=0, atol=1e-10)
    assert np.array_equal(got, got.T)  # exactly symmetric after rebuild
    assert np.linalg.eigvalsh(got).min() >= floor - 1e-10


def test_eigen_clamp_preserves_spd_input():
    m = random_spd(8, 5)
    got = eigen_clamp_min(m, 1e-12)  # eigenvalues already >= 1 here
    assert np.allclose(got, m, rtol=0, atol=1e-10)


def test_jacobi_diagonal_matrix_is_exact():
    m = np.asfortranarray(np.diag([3.0, -1.0, 2.0]))
    vals, vecs = jacobi_eigh(m)
    # no rotations needed, so values and vectors come back bit-exact
    assert np.array_equal(np.sort(vals), [-1.0, 2.0, 3.0])
    assert np.array_equal(vecs, np.eye(3))
    assert np.array_equal((vecs * vals) @ vecs.T, np.diag([3.0, -1.0, 2.0]))
