"""Minimal sparse linear algebra: triplet assembly into CSR and a direct solver.

Assembly may run with several producers appending to their own Triplets
buffers; merging and the factorization itself are single-threaded and hold no
global state, so solves are reentrant and bitwise deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DimensionMismatch, SingularMatrix

# Pivots at or below this magnitude are treated as zero.
PIVOT_THRESHOLD = 1e-14


class Triplets:
    """Unordered (row, col, value) entries destined for one sparse matrix."""

    def __init__(self, nrows: int, ncols: int):
        if nrows < 0 or ncols < 0:
            raise ValueError("matrix dimensions must be nonnegative")
        self.nrows = nrows
        self.ncols = ncols
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, row: int, col: int, value: float) -> None:
        self.extend([row], [col], [value])

    def extend(self, rows, cols, values) -> None:
        """Append a chunk of entries given as equal-length sequences."""
        rows = np.ascontiguousarray(rows, dtype=np.int64).ravel()
        cols = np.ascontiguousarray(cols, dtype=np.int64).ravel()
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        if not (rows.size == cols.size == values.size):
            raise DimensionMismatch("rows, cols and values must have equal length")
        if rows.size == 0:
            return
        if rows.min() < 0 or rows.max() >= self.nrows:
            raise ValueError("row index out of range")
        if cols.min() < 0 or cols.max() >= self.ncols:
            raise ValueError("column index out of range")
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(values)

    def merge(self, other: "Triplets") -> None:
        """Fold another buffer (e.g. from a parallel producer) into this one."""
        if (other.nrows, other.ncols) != (self.nrows, self.ncols):
            raise DimensionMismatch("cannot merge triplets of different shapes")
        self._rows.extend(other._rows)
        self._cols.extend(other._cols)
        self._vals.extend(other._vals)

    @property
    def entries(self):
        rows, cols, vals = self.arrays()
        return list(zip(rows.tolist(), cols.tolist(), vals.tolist()))

    def arrays(self):
        if not self._rows:
            empty_i = np.empty(0, dtype=np.int64)
            return empty_i, empty_i.copy(), np.empty(0, dtype=np.float64)
        return (
            np.concatenate(self._rows),
            np.concatenate(self._cols),
            np.concatenate(self._vals),
        )

    def __len__(self) -> int:
        return sum(r.size for r in self._rows)


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed sparse row matrix with sorted column indices per row."""

    nrows: int
    ncols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.nrows, self.ncols)
        )

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.ncols:
            raise DimensionMismatch(
                f"matrix has {self.ncols} columns but vector has {x.size} entries"
            )
        return self.to_scipy() @ x

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()


def to_csr(triplets: Triplets) -> CsrMatrix:
    """Assemble triplets into CSR, summing duplicates and keeping explicit zeros."""
    rows, cols, vals = triplets.arrays()
    coo = sp.coo_matrix(
        (vals, (rows, cols)), shape=(triplets.nrows, triplets.ncols)
    )
    csr = coo.tocsr()  # sums duplicates, sorts column indices, keeps zeros
    return CsrMatrix(
        nrows=triplets.nrows,
        ncols=triplets.ncols,
        indptr=csr.indptr.astype(np.int64),
        indices=csr.indices.astype(np.int64),
        data=csr.data.astype(np.float64),
    )


def from_scipy(matrix) -> CsrMatrix:
    csr = sp.csr_matrix(matrix)
    csr.sort_indices()
    return CsrMatrix(
        nrows=csr.shape[0],
        ncols=csr.shape[1],
        indptr=csr.indptr.astype(np.int64),
        indices=csr.indices.astype(np.int64),
        data=csr.data.astype(np.float64),
    )


def factor_and_solve(A: CsrMatrix, rhs) -> np.ndarray:
    """Solve A x = rhs by sparse LU with partial pivoting.

    Handles indefinite saddle-point matrices; raises SingularMatrix when a
    pivot at or below PIVOT_THRESHOLD cannot be avoided.
    """
    if A.nrows != A.ncols:
        raise DimensionMismatch("matrix must be square")
    rhs = np.asarray(rhs, dtype=np.float64).ravel()
    if rhs.size != A.nrows:
        raise DimensionMismatch(
            f"matrix has {A.nrows} rows but rhs has {rhs.size} entries"
        )
    try:
        lu = splu(A.to_scipy().tocsc())
    except RuntimeError as exc:  # SuperLU reports exact singularity this way
        raise SingularMatrix(str(exc)) from exc
    pivots = np.abs(lu.U.diagonal())
    if pivots.size and pivots.min() <= PIVOT_THRESHOLD:
        raise SingularMatrix(
            f"pivot {pivots.min():.3e} at or below threshold {PIVOT_THRESHOLD:.0e}"
        )
    return lu.solve(rhs)


class PatternSolver:
    """Direct solver for a sequence of matrices sharing one sparsity pattern.

    The triplet (row, col) layout is fixed at construction; each solve call
    only supplies fresh values in that layout, which are scattered into the
    cached CSC structure without re-sorting. Factorization and pivot checks
    match factor_and_solve.
    """

    def __init__(self, n: int, rows, cols, permc_spec: str = "MMD_AT_PLUS_A"):
        rows = np.ascontiguousarray(rows, dtype=np.int64)
        cols = np.ascontiguousarray(cols, dtype=np.int64)
        if rows.size != cols.size:
            raise DimensionMismatch("rows and cols must have equal length")
        self.n = n
        self.permc_spec = permc_spec
        order = np.lexsort((rows, cols))  # column-major with sorted rows
        self._order = order
        r = rows[order]
        c = cols[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        self._starts = np.flatnonzero(first)
        self.indices = r[self._starts].copy()
        unique_cols = c[self._starts]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.indptr, unique_cols + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)

    def assemble(self, values) -> sp.csc_matrix:
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.size != self._order.size:
            raise DimensionMismatch("value array does not match the pattern")
        data = np.add.reduceat(values[self._order], self._starts)
        return sp.csc_matrix(
            (data, self.indices, self.indptr), shape=(self.n, self.n)
        )

    def solve(self, values, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=np.float64).ravel()
        if rhs.size != self.n:
            raise DimensionMismatch("rhs length does not match the pattern")
        try:
            lu = splu(self.assemble(values), permc_spec=self.permc_spec)
        except RuntimeError as exc:
            raise SingularMatrix(str(exc)) from exc
        pivots = np.abs(lu.U.diagonal())
        if pivots.size and pivots.min() <= PIVOT_THRESHOLD:
            raise SingularMatrix(
                f"pivot {pivots.min():.3e} at or below threshold {PIVOT_THRESHOLD:.0e}"
            )
        return lu.solve(rhs)


def residual_norm(A: CsrMatrix, x, rhs) -> float:
    """Euclidean norm of A x - rhs."""
    x = np.asarray(x, dtype=np.float64).ravel()
    rhs = np.asarray(rhs, dtype=np.float64).ravel()
    if rhs.size != A.nrows:
        raise DimensionMismatch(
            f"matrix has {A.nrows} rows but rhs has {rhs.size} entries"
        )
    return float(np.linalg.norm(A.matvec(x) - rhs))


def write_matrix_market(A: CsrMatrix, path) -> None:
    """Dump the matrix in MatrixMarket coordinate format for debugging."""
    scipy.io.mmwrite(str(path), A.to_scipy())
