"""Constraint evaluation and assembly of the dual (multiplier-space) system.

Every routine here is vectorized over constraints. Gradients are stored per
(constraint, incident vertex) slot, shape ``(m, arity, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sparse import SparseMatrix

EPS_LEN = 1e-12


@dataclass
class ParticleState:
    x: np.ndarray
    inv_mass: np.ndarray
    v: np.ndarray | None = None
    x_pred: np.ndarray | None = None
    x_old: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=np.float64).reshape(-1, 3)
        n = len(self.x)
        self.inv_mass = np.array(self.inv_mass, dtype=np.float64).reshape(n)
        if np.any(self.inv_mass < 0):
            raise ValueError("inverse masses must be non-negative")
        self.v = np.zeros((n, 3)) if self.v is None else np.array(self.v, dtype=np.float64).reshape(n, 3)
        self.x_pred = self.x.copy() if self.x_pred is None else np.array(self.x_pred, dtype=np.float64)
        self.x_old = self.x.copy() if self.x_old is None else np.array(self.x_old, dtype=np.float64)

    @property
    def n_verts(self):
        return len(self.x)

    def copy(self):
        return ParticleState(self.x.copy(), self.inv_mass.copy(), self.v.copy(),
                             self.x_pred.copy(), self.x_old.copy())


@dataclass
class ConstraintSet:
    """Constraints of a single kind: ``"distance"`` (pairs) or ``"arap"`` (tets).

    ``alpha`` is the compliance; ``alpha_tilde`` is ``alpha / dt**2`` and is
    refreshed by :meth:`set_timestep`.
    """

    kind: str
    topology: np.ndarray
    alpha: np.ndarray
    rest_length: np.ndarray | None = None
    rest_inv: np.ndarray | None = None
    rest_volume: np.ndarray | None = None
    alpha_tilde: np.ndarray | None = None
    lam: np.ndarray | None = None
    C: np.ndarray | None = None
    grads: np.ndarray | None = None
    invalid: np.ndarray | None = None

    def __post_init__(self):
        arity = {"distance": 2, "arap": 4}.get(self.kind)
        if arity is None:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        self.topology = np.asarray(self.topology, dtype=np.int64).reshape(-1, arity)
        m = len(self.topology)
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (m,)).copy()
        if np.any(self.alpha < 0):
            raise ValueError("compliance must be non-negative")
        if self.kind == "distance":
            if self.rest_length is None:
                raise ValueError("distance constraints need rest lengths")
            self.rest_length = np.asarray(self.rest_length, dtype=np.float64).reshape(m)
        else:
            if self.rest_inv is None or self.rest_volume is None:
                raise ValueError("ARAP constraints need rest-shape inverses and volumes")
            self.rest_inv = np.asarray(self.rest_inv, dtype=np.float64).reshape(m, 3, 3)
            self.rest_volume = np.asarray(self.rest_volume, dtype=np.float64).reshape(m)
            if np.any(self.rest_volume <= 0):
                raise ValueError("rest volumes must be positive")
        if self.alpha_tilde is None:
            self.alpha_tilde = self.alpha.copy()
        self.lam = np.zeros(m) if self.lam is None else np.asarray(self.lam, dtype=np.float64)
        self.C = np.zeros(m) if self.C is None else self.C
        self.grads = np.zeros((m, arity, 3)) if self.grads is None else self.grads
        self.invalid = np.zeros(m, dtype=bool) if self.invalid is None else self.invalid

    @property
    def m(self):
        return len(self.topology)

    @property
    def arity(self):
        return self.topology.shape[1]

    def set_timestep(self, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.alpha_tilde = self.alpha / (dt * dt)

    @classmethod
    def distance_from_rest(cls, x_rest, edges, alpha):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        x_rest = np.asarray(x_rest, dtype=np.float64)
        L = np.linalg.norm(x_rest[edges[:, 0]] - x_rest[edges[:, 1]], axis=1)
        return cls("distance", edges, alpha, rest_length=L)

    @classmethod
    def arap_from_rest(cls, x_rest, tets, stiffness):
        """ARAP constraints with compliance ``1 / (stiffness * V_tet)``."""
        tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
        Dm = edge_matrix(np.asarray(x_rest, dtype=np.float64), tets)
        vol = np.abs(np.linalg.det(Dm)) / 6.0
        return cls("arap", tets, 1.0 / (stiffness * vol), rest_inv=np.linalg.inv(Dm), rest_volume=vol)


def edge_matrix(x, tets):
    """Columns x1 - x0, x2 - x0, x3 - x0 for each tet, shape (m, 3, 3)."""
    x0 = x[tets[:, 0]]
    return np.stack([x[tets[:, 1]] - x0, x[tets[:, 2]] - x0, x[tets[:, 3]] - x0], axis=2)


def make_compliance(mu, V_tet, dt):
    mu, V_tet = np.asarray(mu, dtype=np.float64), np.asarray(V_tet, dtype=np.float64)
    if np.any(mu <= 0) or np.any(V_tet <= 0) or dt <= 0:
        raise ValueError("stiffness, volume and dt must all be positive")
    out = 1.0 / (mu * V_tet * dt * dt)
    return float(out) if out.ndim == 0 else out


def eval_distance(x, cs: ConstraintSet):
    a, b = cs.topology[:, 0], cs.topology[:, 1]
    d = x[a] - x[b]
    L = np.linalg.norm(d, axis=1)
    bad = L <= EPS_LEN
    n = np.zeros_like(d)
    n[~bad] = d[~bad] / L[~bad, None]
    cs.C = L - cs.rest_length
    cs.grads[:, 0] = n
    cs.grads[:, 1] = -n
    cs.invalid = bad
    return cs


def polar_rotation(F):
    """Rotation factor of F (proper, det = +1), batched over leading axes.

    The sign of the singular vector pair with the smallest singular value is
    flipped when U V^T would be a reflection. A zero matrix maps to identity.
    """
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    F = F.reshape(-1, 3, 3)
    R = np.tile(np.eye(3), (len(F), 1, 1))
    ok = np.all(np.isfinite(F), axis=(1, 2)) & np.any(F != 0.0, axis=(1, 2))
    if np.any(ok):
        U, _, Vt = np.linalg.svd(F[ok])
        flip = np.linalg.det(U @ Vt) < 0
        U[flip, :, 2] *= -1.0
        R[ok] = U @ Vt
    return R[0] if single else R


def eval_arap(x, cs: ConstraintSet):
    """C = ||F - R||_F^2 with gradient 2 (F - R) D_m^{-T} per edge vertex.

    R minimizes ||F - R|| over rotations, so holding it fixed gives the
    exact derivative wherever the minimizer is unique.
    """
    F = edge_matrix(x, cs.topology) @ cs.rest_inv
    bad = ~np.all(np.isfinite(F), axis=(1, 2))
    F[bad] = np.eye(3)
    diff = F - polar_rotation(F)
    H = 2.0 * diff @ np.transpose(cs.rest_inv, (0, 2, 1))
    C = np.einsum("kij,kij->k", diff, diff)
    C[bad] = 0.0
    g = cs.grads
    g[:, 1:] = np.transpose(H, (0, 2, 1))
    g[:, 0] = -g[:, 1:].sum(axis=1)
    g[bad] = 0.0
    cs.C = C
    cs.invalid = bad
    return cs


def evaluate(x, cs: ConstraintSet):
    return eval_distance(x, cs) if cs.kind == "distance" else eval_arap(x, cs)


@dataclass
class SparsityPattern:
    """Fixed CSR pattern of the dual matrix with diagonal-last rows.

    Shared-vertex bookkeeping is flattened: coupling ``p`` contributes
    ``inv_mass[pair_vertex[p]] * g[i, slot_i] . g[j, slot_j]`` to stored
    entry ``pair_entry[p]`` where i, j are that entry's row and column.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    diag_pos: np.ndarray
    pair_entry: np.ndarray
    pair_vertex: np.ndarray
    pair_row: np.ndarray
    pair_slot_row: np.ndarray
    pair_col: np.ndarray
    pair_slot_col: np.ndarray
    topology: np.ndarray = field(repr=False)

    @property
    def nnz(self):
        return int(self.row_offsets[-1])

    def shared_vertices(self, i, j):
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        hit = np.nonzero(self.col_indices[lo:hi] == j)[0]
        if i == j or len(hit) == 0:
            return []
        e = lo + hit[0]
        return sorted(self.pair_vertex[self.pair_entry == e].tolist())

    def new_matrix(self):
        return SparseMatrix(self.n, self.n, self.row_offsets, self.col_indices,
                            np.zeros(self.nnz), diag_last=True)


def build_pattern(cs: ConstraintSet) -> SparsityPattern:
    topo = cs.topology
    m, k = topo.shape
    # incidences sorted by vertex; every ordered pair within a vertex group
    # is one shared-vertex coupling
    con = np.repeat(np.arange(m), k)
    slot = np.tile(np.arange(k), m)
    vert = topo.ravel()
    order = np.lexsort((slot, con, vert))
    con, slot, vert = con[order], slot[order], vert[order]
    starts = np.flatnonzero(np.r_[True, vert[1:] != vert[:-1]])
    sizes = np.diff(np.r_[starts, len(vert)])
    gsize = np.repeat(sizes, sizes)
    gstart = np.repeat(starts, sizes)
    p = np.repeat(np.arange(len(vert)), gsize)
    offs = np.arange(len(p)) - np.repeat(np.cumsum(gsize) - gsize, gsize)
    q = np.repeat(gstart, gsize) + offs
    keep = con[p] != con[q]
    p, q = p[keep], q[keep]
    pi, pj = con[p], con[q]

    keys = np.unique(pi * m + pj)
    ui, uj = keys // m, keys % m
    counts = np.bincount(ui, minlength=m) + 1
    row_offsets = np.r_[0, np.cumsum(counts)]
    nnz = row_offsets[-1]
    col = np.empty(nnz, dtype=np.int64)
    # keys are sorted by (row, col): off-diagonals land sorted, diagonal goes last
    rank_in_row = np.arange(len(keys)) - np.repeat(np.r_[0, np.cumsum(counts - 1)][:-1], counts - 1)
    col[row_offsets[ui] + rank_in_row] = uj
    diag_pos = row_offsets[1:] - 1
    col[diag_pos] = np.arange(m)
    entry_of_key = row_offsets[ui] + rank_in_row
    pair_entry = entry_of_key[np.searchsorted(keys, pi * m + pj)]
    order = np.argsort(pair_entry, kind="stable")
    return SparsityPattern(
        n=m, row_offsets=row_offsets, col_indices=col, diag_pos=diag_pos,
        pair_entry=pair_entry[order], pair_vertex=vert[p][order],
        pair_row=pi[order], pair_slot_row=slot[p][order],
        pair_col=pj[order], pair_slot_col=slot[q][order],
        topology=topo.copy(),
    )


def assemble_system(cs: ConstraintSet, inv_mass, pattern: SparsityPattern, out=None) -> SparseMatrix:
    """Dual matrix grad C M^-1 grad C^T + alpha_tilde written into ``pattern``.

    When ``out`` is given its value array is overwritten in place.
    """
    if pattern.n != cs.m or pattern.topology.shape != cs.topology.shape or \
            not np.array_equal(pattern.topology, cs.topology):
        raise ValueError("sparsity pattern was built for a different topology")
    inv_mass = np.asarray(inv_mass, dtype=np.float64)
    g = cs.grads
    gi = g[pattern.pair_row, pattern.pair_slot_row]
    gj = g[pattern.pair_col, pattern.pair_slot_col]
    contrib = inv_mass[pattern.pair_vertex] * np.einsum("pk,pk->p", gi, gj)
    # bincount returns integers when there are no couplings at all
    vals = np.bincount(pattern.pair_entry, weights=contrib, minlength=pattern.nnz).astype(np.float64)
    w = inv_mass[cs.topology]
    vals[pattern.diag_pos] = np.einsum("ms,msk,msk->m", w, g, g) + cs.alpha_tilde
    if out is None:
        out = pattern.new_matrix()
    out.values[:] = vals
    return out


def rhs(cs: ConstraintSet):
    return -cs.C - cs.alpha_tilde * cs.lam


def apply_dx(cs: ConstraintSet, inv_mass, dlambda):
    """Position correction M^-1 grad C^T dlambda, shape (n_verts, 3)."""
    inv_mass = np.asarray(inv_mass, dtype=np.float64)
    dlambda = np.asarray(dlambda, dtype=np.float64)
    if dlambda.shape != (cs.m,):
        raise ValueError("dlambda must have one entry per constraint")
    n = len(inv_mass)
    contrib = (cs.grads * dlambda[:, None, None]).reshape(-1, 3)
    vert = cs.topology.ravel()
    dx = np.stack([np.bincount(vert, weights=contrib[:, c], minlength=n) for c in range(3)], axis=1)
    return dx * inv_mass[:, None]

