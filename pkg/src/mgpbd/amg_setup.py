"""Unsmoothed-aggregation AMG setup: filter, aggregate, inject.

The setup output is the list of prolongators (plus near-kernel blocks and
smoother parameters). Coarse operators are regenerated from the current
fine matrix by :meth:`AmgHierarchy.refresh`, so one setup can serve many
solves while the sparsity pattern stays fixed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .amg_solve import SmootherParams, compute_smoother_params, update_smoother_params
from .sparse import DenseFactor, DimensionError, GalerkinPlan, SparseMatrix, _gram_schmidt, spmv

log = logging.getLogger(__name__)


@dataclass
class AmgConfig:
    theta_s: float = 0.1
    n_kernel_vecs: int = 6
    kernel: str = "bootstrap"  # or "ones"
    bootstrap_sweeps: int = 20
    min_coarse_size: int = 400
    max_levels: int = 16
    stall_ratio: float = 0.9
    smoother: str = "omega_jacobi"
    smoother_sweeps: int = 2
    lambda_min_est: float = 0.1
    cheb_lower_frac: float = 0.25
    cheb_degree: int = 3
    seed: int = 0
    max_dense_coarse: int = 1000  # larger stalled coarse levels are relaxed, not factored
    coarse_sweeps: int = 10
    lambda_estimator: str = "lanczos"  # or "power"


@dataclass
class AmgLevel:
    A: SparseMatrix
    B: np.ndarray
    P: SparseMatrix | None = None
    agg: np.ndarray | None = None
    smoother: SmootherParams | None = None
    plan: GalerkinPlan | None = field(default=None, repr=False)

    @property
    def size(self):
        return self.A.n_rows

    @property
    def P_csr(self):
        return self.plan.P

    @property
    def Pt(self):
        return self.plan.Pt


@dataclass
class AmgHierarchy:
    levels: list
    config: AmgConfig
    frame_built: int = 0
    stalled: bool = False
    coarse_solver: DenseFactor | None = field(default=None, repr=False)

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def sizes(self):
        return [lev.size for lev in self.levels]

    @property
    def operator_complexity(self):
        return sum(lev.A.nnz for lev in self.levels) / self.levels[0].A.nnz

    def refresh(self, A0: SparseMatrix):
        """Recompute coarse operators and smoother weights for new fine-level values."""
        if A0.shape != self.levels[0].A.shape:
            raise DimensionError("hierarchy was built for a different matrix size")
        self.levels[0].A = A0
        for l in range(len(self.levels) - 1):
            self.levels[l + 1].A = self.levels[l].plan(self.levels[l].A)
        for l, lev in enumerate(self.levels):
            if lev.smoother is not None:
                update_smoother_params(lev.A, lev.smoother, seed=self.config.seed + l)
        self.coarse_solver = _coarse_factor(self.levels[-1], self.config)
        return self

    def report(self):
        lines = [f"levels {self.n_levels}  operator_complexity {self.operator_complexity:.4f}"
                 f"  stalled {int(self.stalled)}  frame_built {self.frame_built}"]
        for l, lev in enumerate(self.levels):
            sm = lev.smoother
            if l == self.n_levels - 1:
                extra = "  direct" if self.coarse_solver is not None else f"  relaxed ({sm.kind})"
            else:
                extra = f"  omega {sm.omega:.4f}  lambda_max {sm.lambda_max:.4f}"
            lines.append(f"level {l}  size {lev.size}  nnz {lev.A.nnz}{extra}")
        return "\n".join(lines) + "\n"


def _coarse_factor(lev, cfg):
    if lev.size > cfg.max_dense_coarse:
        return None
    return DenseFactor(lev.A.to_dense())


def strength_filter(A: SparseMatrix, theta_s=0.1) -> SparseMatrix:
    """Strong off-diagonal couplings, |A_ij| >= theta_s sqrt(|A_ii| |A_jj|).

    The kept entries carry their A values so aggregation can rank them.
    """
    if A.n_rows != A.n_cols:
        raise DimensionError("strength filter needs a square matrix")
    rows, cols, vals = A.row_ids(), A.col_indices, A.values
    d = np.abs(A.diagonal())
    thr = theta_s * np.sqrt(d[rows] * d[cols])
    keep = (rows != cols) & (vals != 0.0) & (np.abs(vals) >= thr)
    S = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=A.shape)
    S.sort_indices()
    return SparseMatrix(A.n_rows, A.n_cols, S.indptr, S.indices, S.data)


def aggregate(S: SparseMatrix):
    """Greedy aggregation in ascending node order, then leftover assignment."""
    agg, n_agg = _kernels.standard_aggregation(S.row_offsets, S.col_indices, S.values)
    return agg, int(n_agg)


def bootstrap_near_kernel(A: SparseMatrix, k=6, sweeps=20, seed=0):
    """Smooth random vectors with Gauss-Seidel on A x = 0.

    Column c starts uniform in (0, max|A_ij|) from generator ``seed ^ c``.
    A column that ends numerically zero (norm < 1e-14 n) is replaced by ones.
    """
    n = A.n_rows
    amax = np.abs(A.values).max() if A.nnz else 1.0
    zero = np.zeros(n)
    B = np.empty((n, k))
    for c in range(k):
        rng = np.random.default_rng(seed ^ c)
        x = rng.uniform(0.0, amax, n)
        _kernels.gauss_seidel(A.row_offsets, A.col_indices, A.values, x, zero, sweeps)
        if np.linalg.norm(x) < 1e-14 * n:
            x = np.ones(n)
        B[:, c] = x
    return B


def build_prolongator(agg, n_agg, B):
    """Orthonormal injection of B into P, one QR per aggregate.

    Each aggregate owns as many coarse unknowns as its block of B has
    independent columns. A block that is entirely zero gets a single
    normalized constant column with a zero coarse near-kernel row.
    """
    agg = np.asarray(agg)
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 1:
        B = B[:, None]
    n, k = B.shape
    if len(agg) != n or np.any(agg < 0) or np.any(agg >= n_agg):
        raise ValueError("aggregation must cover every node")
    order = np.argsort(agg, kind="stable")
    bounds = np.r_[0, np.cumsum(np.bincount(agg, minlength=n_agg))]
    rows, cols, vals, Bn = [], [], [], []
    offset = 0
    for a in range(n_agg):
        nodes = order[bounds[a]:bounds[a + 1]]
        Q, R, _ = _gram_schmidt(B[nodes])
        if Q.shape[1] == 0:
            Q = np.full((len(nodes), 1), 1.0 / np.sqrt(len(nodes)))
            R = np.zeros((1, k))
        r = Q.shape[1]
        rows.append(np.repeat(nodes, r))
        cols.append(np.tile(offset + np.arange(r), len(nodes)))
        vals.append(Q.ravel())
        Bn.append(R)
        offset += r
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, offset))
    P.sort_indices()
    return SparseMatrix(n, offset, P.indptr, P.indices, P.data), np.vstack(Bn)


def build_hierarchy(A0: SparseMatrix, cfg: AmgConfig | None = None, frame=0) -> AmgHierarchy:
    cfg = cfg or AmgConfig()
    if A0.n_rows != A0.n_cols:
        raise DimensionError("system matrix must be square")
    if cfg.kernel == "bootstrap":
        B = bootstrap_near_kernel(A0, cfg.n_kernel_vecs, cfg.bootstrap_sweeps, cfg.seed)
    elif cfg.kernel == "ones":
        B = np.ones((A0.n_rows, 1))
    else:
        raise ValueError(f"unknown near-kernel option {cfg.kernel!r}")
    levels = []
    stalled = False
    A = A0
    while True:
        lev = AmgLevel(A=A, B=B)
        levels.append(lev)
        if A.n_rows < cfg.min_coarse_size or len(levels) >= cfg.max_levels:
            break
        agg, n_agg = aggregate(strength_filter(A, cfg.theta_s))
        P, B_next = build_prolongator(agg, n_agg, B)
        if P.n_cols > cfg.stall_ratio * A.n_rows:
            stalled = True
            log.info("coarsening stalled at level %d (%d -> %d)", len(levels) - 1, A.n_rows, P.n_cols)
            break
        lev.P, lev.agg, lev.plan = P, agg, GalerkinPlan(P)
        A, B = lev.plan(A), B_next
    relax_coarsest = levels[-1].size > cfg.max_dense_coarse
    for l, lev in enumerate(levels if relax_coarsest else levels[:-1]):
        lev.smoother = compute_smoother_params(
            lev.A, cfg.smoother, cfg.lambda_min_est, seed=cfg.seed + l, sweeps=cfg.smoother_sweeps,
            cheb_lower_frac=cfg.cheb_lower_frac, cheb_degree=cfg.cheb_degree,
            estimator=cfg.lambda_estimator)
    if relax_coarsest:
        log.info("coarsest level has %d unknowns; using %d relaxation sweeps there",
                 levels[-1].size, cfg.coarse_sweeps)
    h = AmgHierarchy(levels, cfg, frame_built=frame, stalled=stalled)
    h.coarse_solver = _coarse_factor(levels[-1], cfg)
    return h


def near_kernel_quality(A: SparseMatrix, B):
    """||A b|| / ||b|| per column."""
    B = np.asarray(B).reshape(A.n_rows, -1)
    return np.linalg.norm(spmv(A, B), axis=0) / np.linalg.norm(B, axis=0)
