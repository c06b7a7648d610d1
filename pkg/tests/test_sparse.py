import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plaquesim.errors import DimensionMismatch, SingularMatrix
from plaquesim.sparse import (
    CsrMatrix,
    PatternSolver,
    Triplets,
    factor_and_solve,
    from_scipy,
    residual_norm,
    to_csr,
    write_matrix_market,
)


def test_duplicate_entries_are_summed():
    t = Triplets(1, 1)
    t.add(0, 0, 1.0)
    t.add(0, 0, 2.0)
    csr = to_csr(t)
    assert csr.nnz == 1
    assert csr.data[0] == 3.0


def test_empty_triplets_give_empty_csr():
    csr = to_csr(Triplets(3, 3))
    assert csr.nnz == 0
    assert np.all(csr.indptr == 0)


def test_two_by_two_layout():
    t = Triplets(2, 2)
    t.extend([0, 1], [1, 0], [5.0, 7.0])
    csr = to_csr(t)
    dense = csr.toarray()
    assert dense[0, 1] == 5.0
    assert dense[1, 0] == 7.0
    assert dense[0, 0] == dense[1, 1] == 0.0


def test_explicit_zeros_are_retained():
    t = Triplets(2, 2)
    t.extend([0, 0], [0, 0], [1.0, -1.0])
    csr = to_csr(t)
    assert csr.nnz == 1  # summed to an explicit stored zero
    assert csr.data[0] == 0.0


def test_out_of_range_indices_rejected():
    t = Triplets(2, 2)
    with pytest.raises(ValueError):
        t.add(2, 0, 1.0)
    with pytest.raises(ValueError):
        t.add(0, -1, 1.0)


def test_column_indices_sorted_within_rows():
    t = Triplets(2, 3)
    t.extend([0, 0, 0, 1], [2, 0, 1, 2], [1.0, 2.0, 3.0, 4.0])
    csr = to_csr(t)
    for row in range(2):
        cols = csr.indices[csr.indptr[row] : csr.indptr[row + 1]]
        assert np.all(np.diff(cols) > 0)


def test_identity_solve():
    t = Triplets(2, 2)
    t.extend([0, 1], [0, 1], [1.0, 1.0])
    x = factor_and_solve(to_csr(t), [3.0, -1.0])
    assert np.allclose(x, [3.0, -1.0], rtol=0, atol=0)


def test_hand_eliminated_system():
    # [[2, 1], [1, 3]] x = (5, 10)  =>  x = (1, 3)
    t = Triplets(2, 2)
    t.extend([0, 0, 1, 1], [0, 1, 0, 1], [2.0, 1.0, 1.0, 3.0])
    x = factor_and_solve(to_csr(t), [5.0, 10.0])
    assert np.allclose(x, [1.0, 3.0], atol=1e-14)


def test_zero_matrix_is_singular():
    t = Triplets(2, 2)
    t.extend([0, 1], [0, 1], [0.0, 0.0])
    with pytest.raises(SingularMatrix):
        factor_and_solve(to_csr(t), [1.0, 1.0])


def test_indefinite_saddle_point_system():
    # [[A, B^T], [B, 0]] with A = I2, B = [1, 1]: zero diagonal block
    t = Triplets(3, 3)
    t.extend(
        [0, 1, 0, 1, 2, 2],
        [0, 1, 2, 2, 0, 1],
        [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
    )
    A = to_csr(t)
    rhs = np.array([1.0, 2.0, 3.0])
    x = factor_and_solve(A, rhs)
    assert residual_norm(A, x, rhs) <= 1e-12


def test_residual_norm_examples():
    eye = to_csr_identity(2)
    assert residual_norm(eye, [4.0, 5.0], [4.0, 5.0]) == 0.0
    assert residual_norm(eye, [0.0, 0.0], [3.0, 4.0]) == 5.0


def to_csr_identity(n):
    t = Triplets(n, n)
    t.extend(range(n), range(n), np.ones(n))
    return to_csr(t)


def test_dimension_mismatch():
    eye = to_csr_identity(2)
    with pytest.raises(DimensionMismatch):
        residual_norm(eye, [1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(DimensionMismatch):
        factor_and_solve(eye, [1.0, 2.0, 3.0])


@st.composite
def random_system(draw):
    n = draw(st.integers(min_value=1, max_value=20))
    nnz = draw(st.integers(min_value=0, max_value=3 * n))
    rows = draw(st.lists(st.integers(0, n - 1), min_size=nnz, max_size=nnz))
    cols = draw(st.lists(st.integers(0, n - 1), min_size=nnz, max_size=nnz))
    vals = draw(
        st.lists(
            st.floats(-10, 10, allow_nan=False, width=32),
            min_size=nnz,
            max_size=nnz,
        )
    )
    return n, rows, cols, vals


@given(random_system(), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_assembly_is_order_independent(system, rng):
    n, rows, cols, vals = system
    t1 = Triplets(n, n)
    t1.extend(rows, cols, vals)
    perm = list(range(len(rows)))
    rng.shuffle(perm)
    t2 = Triplets(n, n)
    t2.extend([rows[i] for i in perm], [cols[i] for i in perm], [vals[i] for i in perm])
    x = np.arange(1.0, n + 1)
    y1 = to_csr(t1).matvec(x)
    y2 = to_csr(t2).matvec(x)
    assert np.allclose(y1, y2, rtol=1e-13, atol=1e-13)


@given(random_system())
@settings(max_examples=60, deadline=None)
def test_matvec_matches_dense(system):
    n, rows, cols, vals = system
    t = Triplets(n, n)
    t.extend(rows, cols, vals)
    dense = np.zeros((n, n))
    for r, c, v in zip(rows, cols, vals):
        dense[r, c] += v
    x = np.linspace(-1, 1, n)
    assert np.allclose(to_csr(t).matvec(x), dense @ x, atol=1e-13)


def test_factor_and_solve_is_deterministic():
    rng = np.random.default_rng(7)
    n = 30
    dense = rng.standard_normal((n, n)) + n * np.eye(n)
    A = from_scipy(dense)
    rhs = rng.standard_normal(n)
    x1 = factor_and_solve(A, rhs)
    x2 = factor_and_solve(A, rhs)
    assert np.array_equal(x1, x2)


def test_solver_contract_on_random_systems():
    rng = np.random.default_rng(3)
    for n in (5, 12, 20):
        dense = rng.standard_normal((n, n)) + n * np.eye(n)
        A = from_scipy(dense)
        rhs = rng.standard_normal(n)
        x = factor_and_solve(A, rhs)
        assert residual_norm(A, x, rhs) <= 1e-10 * (1 + np.linalg.norm(rhs))


def test_pattern_solver_matches_factor_and_solve():
    rows = [0, 0, 1, 1, 2, 0]
    cols = [0, 1, 0, 1, 2, 0]  # duplicate (0, 0) entry
    vals = np.array([2.0, 1.0, 1.0, 3.0, 1.5, 0.5])
    t = Triplets(3, 3)
    t.extend(rows, cols, vals)
    rhs = np.array([5.0, 10.0, 3.0])
    expected = factor_and_solve(to_csr(t), rhs)
    solver = PatternSolver(3, rows, cols)
    assert np.allclose(solver.solve(vals, rhs), expected, atol=1e-14)


def test_pattern_solver_detects_singularity():
    solver = PatternSolver(2, [0, 1], [0, 1])
    with pytest.raises(SingularMatrix):
        solver.solve([1.0, 0.0], [1.0, 1.0])


def test_matrix_market_dump(tmp_path):
    t = Triplets(2, 2)
    t.extend([0, 1], [1, 0], [5.0, 7.0])
    path = tmp_path / "matrix.mtx"
    write_matrix_market(to_csr(t), path)
    text = path.read_text()
    assert "%%MatrixMarket" in text.splitlines()[0]
    import scipy.io

    back = scipy.io.mmread(str(path)).toarray()
    assert np.array_equal(back, to_csr(t).toarray())


def test_merge_concurrent_buffers():
    a = Triplets(2, 2)
    a.add(0, 0, 1.0)
    b = Triplets(2, 2)
    b.add(0, 0, 2.0)
    b.add(1, 1, 4.0)
    a.merge(b)
    dense = to_csr(a).toarray()
    assert dense[0, 0] == 3.0
    assert dense[1, 1] == 4.0
