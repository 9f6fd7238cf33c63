"""Sparse and small dense linear algebra kernels.

CSR storage is held in :class:`SparseMatrix`; arithmetic is delegated to
scipy's compiled CSR routines, which walk each row in storage order and
therefore honour both the sorted-column and the diagonal-last layouts.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.linalg import lapack


class DimensionError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class FlopCounter:
    """Tallies floating point work done by the kernels in this package."""

    def __init__(self):
        self.count = 0
        self.enabled = False

    def add(self, n):
        if self.enabled:
            self.count += int(n)


flops = FlopCounter()


@contextmanager
def count_flops():
    flops.count = 0
    flops.enabled = True
    try:
        yield flops
    finally:
        flops.enabled = False


@dataclass
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    diag_last: bool = False
    _diag_pos: np.ndarray | None = field(default=None, repr=False, compare=False)
    _csr: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return int(self.row_offsets[-1])

    def validate(self):
        ro, ci = self.row_offsets, self.col_indices
        if len(ro) != self.n_rows + 1 or ro[0] != 0:
            raise ValueError("bad row_offsets")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if ro[-1] != len(ci) or len(ci) != len(self.values):
            raise ValueError("row_offsets[-1] must equal nnz")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        rows = self.row_ids()
        keys = rows * self.n_cols + ci
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate column within a row")
        if self.diag_last:
            last = ro[1:] - 1
            if np.any(np.diff(ro) == 0) or np.any(ci[last] != np.arange(self.n_rows)):
                raise ValueError("diag_last matrix must end every row with its diagonal")
            if np.count_nonzero(ci == rows) != self.n_rows:
                raise ValueError("diagonal entry stored before the end of its row")
            off = np.ones(len(ci), dtype=bool)
            off[last] = False
            same_row = (rows[1:] == rows[:-1]) & off[1:] & off[:-1]
            if np.any(ci[1:][same_row] <= ci[:-1][same_row]):
                raise ValueError("off-diagonal columns must be sorted")
        else:
            same_row = rows[1:] == rows[:-1]
            if np.any(ci[1:][same_row] <= ci[:-1][same_row]):
                raise ValueError("columns must be sorted when diag_last is unset")
        return self

    def row_ids(self):
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_offsets))

    def diagonal_positions(self):
        """Storage index of each diagonal entry, -1 where absent."""
        if self._diag_pos is None:
            n = min(self.n_rows, self.n_cols)
            pos = np.full(n, -1, dtype=np.int64)
            if self.diag_last:
                last = self.row_offsets[1:n + 1] - 1
                ok = (np.diff(self.row_offsets)[:n] > 0)
                ok[ok] = self.col_indices[last[ok]] == np.nonzero(ok)[0]
                pos[ok] = last[ok]
            else:
                rows = self.row_ids()
                hit = np.nonzero(rows == self.col_indices)[0]
                pos[rows[hit]] = hit
            self._diag_pos = pos
        return self._diag_pos

    def diagonal(self):
        pos = self.diagonal_positions()
        d = np.zeros(len(pos))
        d[pos >= 0] = self.values[pos[pos >= 0]]
        return d

    def to_scipy(self):
        """CSR view sharing this matrix's arrays (cached while the arrays are the same objects)."""
        key = (self.values, self.col_indices, self.row_offsets)
        if self._csr is None or any(a is not b for a, b in zip(self._csr[0], key)):
            M = sp.csr_matrix(key, shape=self.shape)
            self._csr = (key, M)
        return self._csr[1]

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_indices] = self.values
        return out

    def copy(self):
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets.copy(),
                            self.col_indices.copy(), self.values.copy(), self.diag_last)

    @classmethod
    def from_scipy(cls, M):
        M = sp.csr_matrix(M)
        M.sum_duplicates()
        M.sort_indices()
        return cls(M.shape[0], M.shape[1], M.indptr, M.indices, M.data)

    @classmethod
    def from_dense(cls, D, drop_zeros=True):
        D = np.asarray(D, dtype=np.float64)
        if D.ndim != 2:
            raise DimensionError("expected a 2-D array")
        if drop_zeros:
            return cls.from_scipy(sp.csr_matrix(D))
        rows, cols = np.indices(D.shape)
        M = sp.csr_matrix((D.ravel(), (rows.ravel(), cols.ravel())), shape=D.shape)
        return cls(D.shape[0], D.shape[1], M.indptr, M.indices, M.data)

    @classmethod
    def identity(cls, n):
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))


def spmv(A: SparseMatrix, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.n_cols:
        raise DimensionError(f"spmv: matrix has {A.n_cols} columns, vector has {x.shape[0]} entries")
    flops.add(2 * A.nnz * (x.shape[1] if x.ndim == 2 else 1))
    return A.to_scipy() @ x


def transpose(A: SparseMatrix) -> SparseMatrix:
    T = A.to_scipy().T.tocsr()
    T.sort_indices()
    return SparseMatrix(A.n_cols, A.n_rows, T.indptr, T.indices, T.data)


class GalerkinPlan:
    """Reusable P^T A P for a fixed prolongator.

    The transpose of P is formed once; each call then only runs the two
    numeric sparse products and the symmetrization.
    """

    def __init__(self, P: SparseMatrix):
        self.P = P.to_scipy()
        self.Pt = self.P.T.tocsr()
        self.n_fine, self.n_coarse = P.shape

    def __call__(self, A: SparseMatrix) -> SparseMatrix:
        if A.n_rows != A.n_cols or A.n_rows != self.n_fine:
            raise DimensionError(f"galerkin_product: A is {A.shape}, P is {self.P.shape}")
        Ac = self.Pt @ (A.to_scipy() @ self.P)
        # exact symmetry: (a + b) == (b + a) in floating point
        Ac = (Ac + Ac.T.tocsr()) * 0.5
        flops.add(2 * A.nnz * max(1, self.P.nnz // max(1, self.n_fine)) + 2 * Ac.nnz)
        return SparseMatrix.from_scipy(Ac)


def galerkin_product(P: SparseMatrix, A: SparseMatrix) -> SparseMatrix:
    if A.n_rows != A.n_cols:
        raise DimensionError("galerkin_product: A must be square")
    if P.n_rows != A.n_rows:
        raise DimensionError(f"galerkin_product: P has {P.n_rows} rows, A has {A.n_rows}")
    return GalerkinPlan(P)(A)


class DenseFactor:
    """Bunch-Kaufman LDL^T factorization (LAPACK sytrf) of a symmetric matrix."""

    def __init__(self, A, rcond_min=None):
        A = np.array(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError("dense factorization needs a square matrix")
        n = A.shape[0]
        self.n = n
        if n == 0:
            self.lu = A
            self.piv = np.zeros(0, dtype=np.int32)
            return
        if not np.all(np.isfinite(A)):
            raise SingularMatrixError("matrix has non-finite entries")
        lu, piv, info = lapack.dsytrf(A, lower=0)
        if info > 0:
            raise SingularMatrixError(f"exactly singular pivot block at {info - 1} (rank deficient)")
        anorm = np.abs(A).sum(axis=0).max()
        rcond, _ = lapack.dsycon(lu, piv, anorm, lower=0)
        if rcond_min is None:
            rcond_min = n * np.finfo(float).eps
        if anorm == 0.0 or rcond < rcond_min:
            raise SingularMatrixError(f"matrix is singular to working precision (rcond={rcond:.3e})")
        self.lu, self.piv, self.rcond = lu, piv, rcond

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise DimensionError("right-hand side length mismatch")
        if self.n == 0:
            return b.copy()
        x, info = lapack.dsytrs(self.lu, self.piv, b, lower=0)
        flops.add(2 * self.n * self.n)
        return x


def dense_solve(A, b):
    return DenseFactor(A).solve(b)


def _gram_schmidt(B, rank_tol=1e-10):
    """Classical Gram-Schmidt with one reorthogonalization pass.

    Returns (Q, R, kept) where Q has orthonormal columns for the kept
    (independent) input columns only, R has one row per kept column, and
    ``kept`` lists the input column each Q column came from. A column whose
    residual after projection falls under ``rank_tol`` times its own norm is
    dependent: it contributes an R column but no Q column.
    """
    B = np.asarray(B, dtype=np.float64)
    m, k = B.shape
    Q = np.zeros((m, min(m, k)))
    R = np.zeros((min(m, k), k))
    kept = []
    r = 0
    for j in range(k):
        v = B[:, j].copy()
        norm0 = np.linalg.norm(v)
        if norm0 == 0.0:
            continue
        coef = np.zeros(r)
        for _ in range(2):
            c = Q[:, :r].T @ v
            v -= Q[:, :r] @ c
            coef += c
        R[:r, j] = coef
        nv = np.linalg.norm(v)
        if r == m or nv <= rank_tol * norm0:
            continue
        Q[:, r] = v / nv
        R[r, j] = nv
        kept.append(j)
        r += 1
    return Q[:, :r], R[:r], kept


def thin_qr(B, rank_tol=1e-10):
    """Thin QR with a non-negative R diagonal.

    Full rank input gives the usual factorization. For a dependent column j,
    R[j, :] is zero and Q[:, j] is completed deterministically: the unit
    vectors e_0, e_1, ... are projected against all other Q columns and the
    first with a residual norm above 1/2 is taken.
    """
    B = np.asarray(B, dtype=np.float64)
    m, k = B.shape
    if m < k:
        raise DimensionError("thin_qr needs rows >= cols")
    Qr, Rr, kept = _gram_schmidt(B, rank_tol)
    Q = np.zeros((m, k))
    R = np.zeros((k, k))
    Q[:, kept] = Qr
    R[kept, :] = Rr
    missing = [j for j in range(k) if j not in kept]
    basis = list(Qr.T)
    e = 0
    for j in missing:
        while True:
            v = np.zeros(m)
            v[e] = 1.0
            e += 1
            for _ in range(2):
                for q in basis:
                    v -= (q @ v) * q
            nv = np.linalg.norm(v)
            if nv > 0.5:
                break
        q = v / nv
        Q[:, j] = q
        basis.append(q)
    return Q, R


def power_method_lmax(A: SparseMatrix, iters=100, seed=0, x0=None, return_vector=False):
    """Largest-magnitude eigenvalue estimate by normalized power iteration.

    Returns the Rayleigh quotient of the final iterate, which converges at
    twice the rate of the norm ratio for symmetric input. ``x0`` warm-starts
    the iteration; ``return_vector`` also returns the last iterate.
    """
    if A.n_rows != A.n_cols:
        raise DimensionError("power method needs a square matrix")
    n = A.n_rows
    if n == 0 or not np.any(A.values):
        return (0.0, np.zeros(n)) if return_vector else 0.0
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, n)
    if x0 is not None:
        # keep a random admixture so modes absent from x0 can still grow
        x = np.asarray(x0, dtype=np.float64) / (np.linalg.norm(x0) or 1.0) + 0.1 * x / np.sqrt(n)
    x /= np.linalg.norm(x)
    M = A.to_scipy()
    lam = 0.0
    for _ in range(iters):
        y = M @ x
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return (0.0, x) if return_vector else 0.0
        x = y / ny
    flops.add(2 * A.nnz * iters)
    return (lam, x) if return_vector else lam


def read_matrix_market(path) -> SparseMatrix:
    """Load a Matrix Market coordinate file; symmetric storage is expanded."""
    M = scipy.io.mmread(str(path))
    return SparseMatrix.from_scipy(sp.csr_matrix(M))


def write_matrix_market(path, A: SparseMatrix, symmetric=False):
    M = A.to_scipy().tocoo()
    if symmetric:
        keep = M.row >= M.col
        M = sp.coo_matrix((M.data[keep], (M.row[keep], M.col[keep])), shape=M.shape)
    scipy.io.mmwrite(str(path), M, symmetry="symmetric" if symmetric else "general")
