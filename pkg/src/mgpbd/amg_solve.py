"""Smoothers, the V-cycle and the multigrid-preconditioned CG loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from scipy.sparse.linalg import eigsh

from .sparse import SparseMatrix, flops, power_method_lmax, spmv

SMOOTHERS = ("omega_jacobi", "chebyshev", "gauss_seidel")


class IndefinitePreconditionerError(RuntimeError):
    pass


@dataclass
class SmootherParams:
    kind: str = "omega_jacobi"
    omega: float = 1.0
    cheb_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lambda_max: float = 1.0
    lambda_min_est: float = 0.1
    sweeps: int = 2
    cheb_lower_frac: float = 0.25
    cheb_upper_safety: float = 1.1
    eigvec: np.ndarray | None = field(default=None, repr=False, compare=False)
    estimator: str = "lanczos"

    def __post_init__(self):
        if self.kind not in SMOOTHERS:
            raise ValueError(f"unknown smoother {self.kind!r}")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("omega must lie in (0, 2)")
        if self.sweeps < 1:
            raise ValueError("need at least one sweep")


def jacobi_weight(lambda_max, lambda_min_est=0.1):
    return 2.0 / (lambda_max + lambda_min_est)


def chebyshev_coefficients(lower, upper, degree):
    """Three-term recurrence coefficients for a Chebyshev smoother on [lower, upper].

    Row 0 holds (0, 1/theta) for the first step; row k holds the
    (previous-direction, residual) weights of step k.
    """
    theta = 0.5 * (upper + lower)
    delta = 0.5 * (upper - lower)
    sigma = theta / delta
    rho = 1.0 / sigma
    coeffs = np.zeros((degree, 2))
    coeffs[0] = (0.0, 1.0 / theta)
    for k in range(1, degree):
        rho_next = 1.0 / (2.0 * sigma - rho)
        coeffs[k] = (rho_next * rho, 2.0 * rho_next / delta)
        rho = rho_next
    return coeffs


def scaled_operator(A: SparseMatrix):
    """D^-1/2 A D^-1/2, which has the spectrum of D^-1 A but stays symmetric."""
    d = A.diagonal()
    if np.any(d == 0):
        raise ValueError("matrix has a zero diagonal entry")
    s = 1.0 / np.sqrt(np.abs(d))
    rows = A.row_ids()
    return SparseMatrix(A.n_rows, A.n_cols, A.row_offsets, A.col_indices,
                        A.values * s[rows] * s[A.col_indices], A.diag_last)


ESTIMATORS = ("lanczos", "power")


def gershgorin_bound(S: SparseMatrix):
    """max_i sum_j |S_ij|, a guaranteed upper bound on the spectral radius."""
    return float(np.bincount(S.row_ids(), weights=np.abs(S.values), minlength=S.n_rows).max())


def estimate_lambda_max(A: SparseMatrix, method="lanczos", power_iters=100, seed=0, x0=None):
    """Upper estimate of lambda_max(D^-1 A) and the matching eigenvector approximation.

    ``power`` returns the plain Rayleigh quotient. ``lanczos`` adds the
    residual norm ||S v - theta v|| to the Ritz value, which bounds the
    distance to the nearest eigenvalue, then caps the result by Gershgorin.
    ``x0`` warm-starts the power method only.
    """
    if method not in ESTIMATORS:
        raise ValueError(f"unknown eigenvalue estimator {method!r}")
    S = scaled_operator(A)
    if method == "power" or S.n_rows < 3:
        return power_method_lmax(S, power_iters, seed, x0=x0, return_vector=True)
    M = S.to_scipy()
    if S.n_rows <= 64:
        w, V = np.linalg.eigh(M.toarray())
        theta, v = float(w[-1]), V[:, -1]
    else:
        # fresh random start: a warm start can lock onto the second eigenpair
        v0 = np.random.default_rng(seed).uniform(-1.0, 1.0, S.n_rows)
        w, V = eigsh(M, k=1, which="LA", tol=1e-6, v0=v0)
        theta, v = float(w[0]), V[:, 0]
    flops.add(2 * S.nnz * 20)
    bound = theta + float(np.linalg.norm(M @ v - theta * v))
    return min(bound, gershgorin_bound(S)), v


def compute_smoother_params(A: SparseMatrix, kind="omega_jacobi", lambda_min_est=0.1, seed=0,
                            sweeps=2, power_iters=100, cheb_lower_frac=0.25, cheb_degree=3,
                            cheb_upper_safety=1.1, estimator="lanczos"):
    lmax, vec = estimate_lambda_max(A, estimator, power_iters, seed)
    omega = jacobi_weight(lmax, lambda_min_est)
    upper = cheb_upper_safety * lmax
    coeffs = chebyshev_coefficients(cheb_lower_frac * upper, upper, cheb_degree)
    return SmootherParams(kind, omega, coeffs, lmax, lambda_min_est, sweeps,
                          cheb_lower_frac, cheb_upper_safety, vec, estimator)


def update_smoother_params(A: SparseMatrix, params: SmootherParams, power_iters=100, seed=0):
    """Re-estimate lambda_max for new matrix values, warm-starting from the stored eigenvector.

    The weights must track the matrix: a too small lambda_max makes the
    smoother divergent for the top modes and the V-cycle indefinite.
    """
    lmax, vec = estimate_lambda_max(A, params.estimator, power_iters, seed, x0=params.eigvec)
    upper = params.cheb_upper_safety * lmax
    params.lambda_max = lmax
    params.eigvec = vec
    params.omega = jacobi_weight(lmax, params.lambda_min_est)
    params.cheb_coeffs = chebyshev_coefficients(params.cheb_lower_frac * upper, upper,
                                                len(params.cheb_coeffs))
    return params


def smooth(A: SparseMatrix, b, x, params: SmootherParams, backward=False):
    """Apply ``params.sweeps`` smoothing sweeps. ``backward`` only affects Gauss-Seidel."""
    x = np.array(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = A.n_rows
    if params.kind == "gauss_seidel":
        _kernels.gauss_seidel(A.row_offsets, A.col_indices, A.values, x, b, params.sweeps, backward)
        flops.add(2 * A.nnz * params.sweeps)
        return x
    dinv = 1.0 / A.diagonal()
    if params.kind == "omega_jacobi":
        wd = params.omega * dinv
        for _ in range(params.sweeps):
            x += wd * (b - spmv(A, x))
        flops.add(3 * n * params.sweeps)
        return x
    coeffs = params.cheb_coeffs
    for _ in range(params.sweeps):
        z = dinv * (b - spmv(A, x))
        d = coeffs[0, 1] * z
        for k in range(1, len(coeffs)):
            x += d
            z -= dinv * spmv(A, d)
            d = coeffs[k, 0] * d + coeffs[k, 1] * z
        x += d
        flops.add(7 * n * len(coeffs))
    return x


def vcycle(h, b):
    """One V-cycle from a zero initial guess on every level."""
    if h is None or not h.levels:
        raise ValueError("empty hierarchy")
    return _vcycle(h, 0, np.asarray(b, dtype=np.float64))


def _vcycle(h, l, b):
    lev = h.levels[l]
    if l == len(h.levels) - 1:
        if h.coarse_solver is not None:
            return h.coarse_solver.solve(b)
        # stalled, too large to factor: symmetric relaxation as the coarse solve
        half = replace(lev.smoother, sweeps=max(1, h.config.coarse_sweeps // 2))
        x = smooth(lev.A, b, np.zeros_like(b), half)
        return smooth(lev.A, b, x, half, backward=True)
    x = smooth(lev.A, b, np.zeros_like(b), lev.smoother)
    r = b - spmv(lev.A, x)
    rc = lev.Pt @ r
    xc = _vcycle(h, l + 1, rc)
    x += lev.P_csr @ xc
    flops.add(4 * lev.P_csr.nnz + 2 * len(b))
    # reversed GS post-smoothing keeps the cycle symmetric
    return smooth(lev.A, b, x, lev.smoother, backward=True)


@dataclass
class SolveReport:
    iterations: int = 0
    rel_residual_history: list = field(default_factory=lambda: [1.0])
    converged: bool = False
    wall_time: float = 0.0

    def csv_rows(self, frame, outer_iteration):
        return [(frame, outer_iteration, k, r) for k, r in enumerate(self.rel_residual_history)]


def pcg(A: SparseMatrix, b, precond=None, tol=1e-8, maxiter=200):
    """Preconditioned CG from x = 0, stopping on ||b - A x|| / ||b|| <= tol."""
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=np.float64)
    n = len(b)
    x = np.zeros(n)
    report = SolveReport()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        report.converged = True
        report.wall_time = time.perf_counter() - t0
        return x, report
    r = b.copy()
    z = precond(r) if precond is not None else r.copy()
    rz = r @ z
    if not rz > 0.0:
        raise IndefinitePreconditionerError(f"preconditioner gave <z, r> = {rz:.3e} at iteration 0")
    p = z.copy()
    for k in range(maxiter):
        Ap = spmv(A, p)
        pAp = p @ Ap
        if not pAp > 0.0:
            raise IndefinitePreconditionerError(f"<p, A p> = {pAp:.3e} at iteration {k}; matrix is not SPD")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        report.rel_residual_history.append(rel)
        report.iterations = k + 1
        flops.add(10 * n)
        if rel <= tol:
            report.converged = True
            break
        z = precond(r) if precond is not None else r.copy()
        rz_new = r @ z
        if not rz_new > 0.0:
            raise IndefinitePreconditionerError(
                f"preconditioner gave <z, r> = {rz_new:.3e} at iteration {k + 1}")
        p = z + (rz_new / rz) * p
        rz = rz_new
    report.wall_time = time.perf_counter() - t0
    return x, report


def mgpcg(h, A: SparseMatrix, b, tol=1e-8, maxiter=200):
    return pcg(A, b, lambda r: vcycle(h, r), tol, maxiter)


def jacobi_pcg(A: SparseMatrix, b, tol=1e-8, maxiter=200):
    dinv = 1.0 / A.diagonal()
    return pcg(A, b, lambda r: dinv * r, tol, maxiter)


def amg_solve(h, A, b, tol=1e-8, maxiter=200):
    """Stand-alone V-cycle iteration; a debugging aid, not a production path."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    report = SolveReport()
    bnorm = np.linalg.norm(b) or 1.0
    for k in range(maxiter):
        r = b - spmv(A, x)
        x += vcycle(h, r)
        rel = np.linalg.norm(b - spmv(A, x)) / bnorm
        report.rel_residual_history.append(rel)
        report.iterations = k + 1
        if rel <= tol:
            report.converged = True
            break
    return x, report
