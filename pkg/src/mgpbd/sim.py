"""Frame stepping: the multigrid-preconditioned global solve and the XPBD baseline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .amg_setup import AmgConfig, build_hierarchy
from .amg_solve import IndefinitePreconditionerError, jacobi_pcg, mgpcg
from .constraints import (ConstraintSet, ParticleState, apply_dx, assemble_system, build_pattern,
                          evaluate, rhs)
from .scenes import sdf_eval

log = logging.getLogger(__name__)

SOLVERS = ("mgpbd", "xpbd_jacobi", "pcg_jacobi")
OMEGA_MIN = 1e-3


class SolverAbort(RuntimeError):
    pass


@dataclass
class SimConfig:
    dt: float = 3e-3
    frames: int = 10
    maxiter: int = 50
    time_budget: float | None = None
    tol: float = 1e-4
    omega_relax: float = 0.25
    setup_interval: int = 20
    solver: str = "mgpbd"
    gravity: tuple = (0.0, -9.8, 0.0)
    seed: int = 0
    damping: float = 1.0
    inner_tol: float = 1e-2
    inner_maxiter: int = 100
    backtracking: bool = True
    omega_persist: bool = False  # keep a halved omega for the rest of the frame
    deterministic: bool = False
    xpbd_relax: float = 0.5
    amg: AmgConfig | None = None  # None picks a default for the constraint kind

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.setup_interval < 1:
            raise ValueError("setup_interval must be at least 1")
        if not 0.0 < self.omega_relax <= 1.0:
            raise ValueError("omega_relax must lie in (0, 1]")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {', '.join(SOLVERS)}")
        if self.maxiter < 1:
            raise ValueError("maxiter must be at least 1")
        if self.time_budget is not None and self.time_budget <= 0:
            raise ValueError("time_budget must be positive")


@dataclass
class FrameStats:
    frame: int
    iterations_used: int = 0
    final_rel_dual_residual: float = 0.0
    setup_performed: bool = False
    wall_time: float = 0.0
    residual_history: list = field(default_factory=list, repr=False)
    solve_reports: list = field(default_factory=list, repr=False)

    CSV_HEADER = ("frame", "iterations_used", "final_rel_dual_residual", "setup_performed", "wall_time")

    def csv_row(self):
        return (self.frame, self.iterations_used, repr(float(self.final_rel_dual_residual)),
                int(self.setup_performed), repr(float(self.wall_time)))


class HierarchyCache:
    """Sparsity pattern, reusable matrix storage and the lazily rebuilt hierarchy."""

    def __init__(self):
        self.pattern = None
        self.matrix = None
        self.hierarchy = None
        self.stale = True
        self.retry = False
        self.frame = 0
        self._topology = None

    def invalidate(self):
        self.stale = True
        self.hierarchy = None

    def sync(self, cs: ConstraintSet):
        if self._topology is None or not np.array_equal(self._topology, cs.topology):
            self.pattern = build_pattern(cs)
            self.matrix = self.pattern.new_matrix()
            self._topology = cs.topology.copy()
            self.invalidate()


def default_amg_config(kind):
    """Six rigid-like near-kernel vectors for tets, one for distance constraints."""
    return AmgConfig(n_kernel_vecs=6 if kind == "arap" else 1)


def semi_euler(state: ParticleState, dt, gravity=(0.0, -9.8, 0.0), f_ext=None):
    free = state.inv_mass > 0
    acc = np.broadcast_to(np.asarray(gravity, dtype=np.float64), state.x.shape).copy()
    if f_ext is not None:
        acc += np.asarray(f_ext, dtype=np.float64) * state.inv_mass[:, None]
    state.v[free] += dt * acc[free]
    state.v[~free] = 0.0
    state.x_old = state.x.copy()
    state.x = state.x + dt * state.v
    state.x_pred = state.x.copy()
    return state


def backtrack_relax(residual_prev, residual_new, omega, omega_min=OMEGA_MIN):
    if not 0.0 < omega <= 1.0:
        raise ValueError("omega must lie in (0, 1]")
    if residual_new > residual_prev:
        return max(0.5 * omega, omega_min)
    return omega


def _contacts(x, colliders, movable):
    """Projected positions and contact normals for every penetrating vertex."""
    x = x.copy()
    normals = np.zeros_like(x)
    hit = np.zeros(len(x), dtype=bool)
    for c in colliders:
        d, g = sdf_eval(c, x)
        pen = (d < 0) & movable
        x[pen] -= d[pen, None] * g[pen]
        normals[pen] = g[pen]
        hit |= pen
    return x, hit, normals


def _reflect(v, hit, normals):
    vn = np.einsum("ij,ij->i", v, normals)
    into = hit & (vn < 0)
    v[into] -= 2.0 * vn[into, None] * normals[into]
    return v


def collide_sdf(state: ParticleState, colliders):
    """Project penetrating vertices to the surface and reflect inward normal velocity."""
    if not colliders:
        return state
    state.x, hit, normals = _contacts(state.x, colliders, state.inv_mass > 0)
    _reflect(state.v, hit, normals)
    return state


def _finish(state, cfg, colliders):
    hit = None
    if colliders:
        state.x, hit, normals = _contacts(state.x, colliders, state.inv_mass > 0)
    state.v = (state.x - state.x_old) / cfg.dt
    if hit is not None:
        _reflect(state.v, hit, normals)
    if cfg.damping != 1.0:
        state.v *= cfg.damping
    return state


def _budget_left(cfg, t0):
    if cfg.time_budget is None or cfg.deterministic:
        return True
    return time.perf_counter() - t0 < cfg.time_budget


def step_frame_mgpbd(state: ParticleState, cs: ConstraintSet, cfg: SimConfig, cache: HierarchyCache,
                     colliders=(), frame=None):
    """Advance one frame with global dual solves (mgpbd or pcg_jacobi)."""
    t0 = time.perf_counter()
    frame = cache.frame if frame is None else frame
    stats = FrameStats(frame)
    cache.sync(cs)
    cs.set_timestep(cfg.dt)
    semi_euler(state, cfg.dt, cfg.gravity)
    cs.lam = np.zeros(cs.m)
    evaluate(state.x, cs)
    b = rhs(cs)
    res0 = np.linalg.norm(b)
    res = res0
    stats.residual_history.append(1.0 if res0 > 0 else 0.0)
    omega = cfg.omega_relax
    it = 0
    while it < cfg.maxiter and res > cfg.tol * res0 and res0 > 0 and _budget_left(cfg, t0):
        A = assemble_system(cs, state.inv_mass, cache.pattern, out=cache.matrix)
        try:
            if cfg.solver == "mgpbd":
                rebuild = it == 0 and (frame % cfg.setup_interval == 0 or cache.retry)
                if cache.hierarchy is None or cache.stale or rebuild:
                    amg = cfg.amg or default_amg_config(cs.kind)
                    cache.hierarchy = build_hierarchy(A, amg, frame)
                    cache.stale = False
                    # a system that could not be coarsened at all (e.g. a solid at rest,
                    # where A is nearly diagonal) is set up again next frame
                    h = cache.hierarchy
                    cache.retry = h.n_levels == 1 and h.levels[0].size >= amg.min_coarse_size
                    stats.setup_performed = True
                else:
                    cache.hierarchy.refresh(A)
                dlam, rep = mgpcg(cache.hierarchy, A, b, cfg.inner_tol, cfg.inner_maxiter)
            else:
                dlam, rep = jacobi_pcg(A, b, cfg.inner_tol, cfg.inner_maxiter)
        except IndefinitePreconditionerError as e:
            raise SolverAbort(f"frame {frame}, iteration {it}: {e}") from e
        if cfg.deterministic:
            rep.wall_time = 0.0
        stats.solve_reports.append(rep)
        dx = apply_dx(cs, state.inv_mass, dlam)
        x, lam = state.x, cs.lam
        if not cfg.omega_persist:
            omega = cfg.omega_relax
        while True:
            cs.lam = lam + dlam
            x_try = x + omega * dx
            evaluate(x_try, cs)
            b_try = rhs(cs)
            res_try = np.linalg.norm(b_try)
            if not cfg.backtracking or res_try <= res or omega <= OMEGA_MIN:
                break
            omega = backtrack_relax(res, res_try, omega)
        it += 1
        if cfg.backtracking and res_try > res:
            # no step size reduces the residual; keep the last accepted state
            cs.lam = lam
            evaluate(x, cs)
            break
        state.x, b, res = x_try, b_try, res_try
        stats.residual_history.append(res / res0)
    stats.iterations_used = it
    stats.final_rel_dual_residual = res / res0 if res0 > 0 else 0.0
    _finish(state, cfg, colliders)
    cache.frame = frame + 1
    stats.wall_time = 0.0 if cfg.deterministic else time.perf_counter() - t0
    return state, stats


def xpbd_diagonal(cs: ConstraintSet, inv_mass):
    """Per-constraint diagonal of the dual matrix, grad C_j M^-1 grad C_j^T + alpha_tilde_j."""
    w = np.asarray(inv_mass)[cs.topology]
    return np.einsum("ma,mak,mak->m", w, cs.grads, cs.grads) + cs.alpha_tilde


def step_frame_xpbd(state: ParticleState, cs: ConstraintSet, cfg: SimConfig, colliders=(), frame=0):
    """Jacobi-style XPBD: every diagonal update from the same state, one relaxed move."""
    t0 = time.perf_counter()
    stats = FrameStats(frame)
    cs.set_timestep(cfg.dt)
    semi_euler(state, cfg.dt, cfg.gravity)
    cs.lam = np.zeros(cs.m)
    evaluate(state.x, cs)
    b = rhs(cs)
    res0 = np.linalg.norm(b)
    res = res0
    stats.residual_history.append(1.0 if res0 > 0 else 0.0)
    it = 0
    while it < cfg.maxiter and res > cfg.tol * res0 and res0 > 0 and _budget_left(cfg, t0):
        d = xpbd_diagonal(cs, state.inv_mass)
        dlam = np.divide(b, d, out=np.zeros_like(b), where=d > 0)
        dlam *= cfg.xpbd_relax
        state.x = state.x + apply_dx(cs, state.inv_mass, dlam)
        cs.lam = cs.lam + dlam
        evaluate(state.x, cs)
        b = rhs(cs)
        res = np.linalg.norm(b)
        it += 1
        stats.residual_history.append(res / res0)
    stats.iterations_used = it
    stats.final_rel_dual_residual = res / res0 if res0 > 0 else 0.0
    _finish(state, cfg, colliders)
    stats.wall_time = 0.0 if cfg.deterministic else time.perf_counter() - t0
    return state, stats


class Simulator:
    """Owns the state, constraint set and solver cache for a run."""

    def __init__(self, scene, cfg: SimConfig):
        self.scene = scene
        self.cfg = cfg
        self.state = ParticleState(scene.x.copy(), scene.inv_mass.copy())
        self.cs = scene.constraints
        self.cache = HierarchyCache()
        self.frame = 0

    def step(self):
        if self.cfg.solver == "xpbd_jacobi":
            _, stats = step_frame_xpbd(self.state, self.cs, self.cfg, self.scene.colliders, self.frame)
        else:
            _, stats = step_frame_mgpbd(self.state, self.cs, self.cfg, self.cache,
                                        self.scene.colliders, self.frame)
        self.frame += 1
        return stats

    def run(self, frames=None, callback=None):
        out = []
        for _ in range(self.cfg.frames if frames is None else frames):
            stats = self.step()
            out.append(stats)
            if callback is not None:
                callback(self, stats)
        return out
