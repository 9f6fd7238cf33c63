"""Procedural scenes, tetrahedral mesh files and analytic SDF colliders."""
from __future__ import annotations

import configparser
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import ConstraintSet, edge_matrix

log = logging.getLogger(__name__)


class MeshFormatError(ValueError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass
class SdfCollider:
    kind: str
    normal: np.ndarray | None = None
    offset: float = 0.0
    center: np.ndarray | None = None
    radius: float = 1.0
    axis: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "plane":
            self.normal = _unit(self.normal if self.normal is not None else (0.0, 1.0, 0.0))
        elif self.kind in ("sphere", "cylinder"):
            self.center = np.zeros(3) if self.center is None else np.asarray(self.center, dtype=np.float64)
            if self.kind == "cylinder":
                self.axis = _unit(self.axis if self.axis is not None else (0.0, 0.0, 1.0))
            if self.radius <= 0:
                raise ValueError("radius must be positive")
        else:
            raise ValueError(f"unknown collider kind {self.kind!r}")


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero direction vector")
    return v / n


def _perpendicular(a):
    e = np.eye(3)[np.argmin(np.abs(a))]
    p = np.cross(a, e)
    return p / np.linalg.norm(p)


def sdf_eval(c: SdfCollider, x):
    """Signed distance (negative inside) and unit outward gradient.

    On a medial set (sphere center, cylinder axis) the gradient falls back
    to +y for spheres and to a fixed perpendicular of the axis for cylinders.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    if c.kind == "plane":
        d = x @ c.normal - c.offset
        g = np.broadcast_to(c.normal, x.shape).copy()
    else:
        q = x - c.center
        if c.kind == "cylinder":
            q = q - np.outer(q @ c.axis, c.axis)
            fallback = _perpendicular(c.axis)
        else:
            fallback = np.array([0.0, 1.0, 0.0])
        r = np.linalg.norm(q, axis=1)
        d = r - c.radius
        g = np.tile(fallback, (len(x), 1))
        ok = r > 1e-14
        g[ok] = q[ok] / r[ok, None]
    if single:
        return float(d[0]), g[0]
    return d, g


@dataclass
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray

    @property
    def volumes(self):
        return np.linalg.det(edge_matrix(self.vertices, self.tets)) / 6.0


@dataclass
class SceneDef:
    name: str
    x: np.ndarray
    constraints: ConstraintSet
    inv_mass: np.ndarray
    pins: np.ndarray
    stiffness: float
    density: float
    mass: np.ndarray
    colliders: list = field(default_factory=list)
    sim: dict = field(default_factory=dict)
    faces: np.ndarray | None = None
    grid: int | None = None
    tets: np.ndarray | None = None

    @property
    def kind(self):
        return "cloth" if self.grid is not None else "solid"

    def set_stiffness(self, stiffness):
        """Reset every compliance: 1/k for distance constraints, 1/(k V) for tets."""
        if not stiffness > 0:
            raise ValueError("stiffness must be positive")
        cs = self.constraints
        if cs.kind == "arap":
            cs.alpha = 1.0 / (stiffness * cs.rest_volume)
        else:
            cs.alpha = np.full(cs.m, 1.0 / stiffness)
        cs.alpha_tilde = cs.alpha.copy()
        self.stiffness = stiffness
        return self

    def validate(self):
        cs = self.constraints
        key = np.sort(cs.topology, axis=1)
        if len(np.unique(key, axis=0)) != cs.m:
            raise ValueError("duplicate constraints")
        if len(self.pins) and (self.pins.min() < 0 or self.pins.max() >= len(self.x)):
            raise ValueError("pin index out of range")
        if cs.kind == "arap" and np.any(cs.rest_volume <= 0):
            raise ValueError("non-positive rest volume")
        return self


def _finish_masses(mass, pins):
    inv_mass = np.where(mass > 0, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
    inv_mass[pins] = 0.0
    return inv_mass


def cloth_edges(N, diagonals=True):
    """Grid edges of an (N+1) x (N+1) particle sheet, grouped by family.

    Order: horizontal (row-major, index j*N + i), vertical (j*(N+1) + i),
    then both diagonals of every quad.
    """
    idx = np.arange((N + 1) ** 2).reshape(N + 1, N + 1)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    parts = [horiz, vert]
    if diagonals:
        parts.append(np.stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()], axis=1))
        parts.append(np.stack([idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()], axis=1))
    return np.concatenate(parts)


def build_cloth(N, spacing=None, stiffness=1e9, areal_density=1.0, diagonals=True,
                pins="corners", name=None):
    """Horizontal sheet in the x-z plane with distance constraints.

    ``pins="corners"`` fixes the two corners of the j = 0 row. Masses are
    uniform and sum to ``areal_density`` times the sheet area. Compliance of
    every edge is ``1 / stiffness``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    spacing = 1.0 / N if spacing is None else spacing
    i, j = np.meshgrid(np.arange(N + 1), np.arange(N + 1))
    x = np.stack([i.ravel() * spacing, np.zeros(i.size), j.ravel() * spacing], axis=1)
    edges = cloth_edges(N, diagonals)
    cs = ConstraintSet.distance_from_rest(x, edges, 1.0 / stiffness)
    n = len(x)
    area = (N * spacing) ** 2
    mass = np.full(n, areal_density * area / n)
    if pins == "corners":
        pin_idx = np.array([0, N])
    elif pins in (None, "none"):
        pin_idx = np.zeros(0, dtype=np.int64)
    else:
        pin_idx = np.asarray(pins, dtype=np.int64)
    idx = np.arange(n).reshape(N + 1, N + 1)
    quads = np.stack([idx[:-1, :-1], idx[:-1, 1:], idx[1:, 1:], idx[1:, :-1]], axis=-1).reshape(-1, 4)
    faces = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
    return SceneDef(name or f"cloth{N}", x, cs, _finish_masses(mass, pin_idx), pin_idx,
                    stiffness, areal_density, mass, faces=faces, grid=N).validate()


_FIVE_TET = np.array([[0, 4, 2, 1], [6, 4, 2, 7], [5, 4, 1, 7], [3, 2, 1, 7], [4, 2, 1, 7]])


def lattice_tets(nx, ny, nz, spacing=1.0, split=6):
    """Vertices and positively oriented tets of a box lattice.

    ``split=6`` cuts each cell into the six tets around its main diagonal
    (Freudenthal split). ``split=5`` uses one central tet plus four corner
    tets, mirrored on odd cells so faces match between neighbours.
    """
    if split not in (5, 6):
        raise ValueError("split must be 5 or 6")
    grid = np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1),
                                indexing="ij"), axis=-1).reshape(-1, 3)
    verts = grid * float(spacing)
    vid = np.arange(len(grid)).reshape(nx + 1, ny + 1, nz + 1)
    cells = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
                     axis=-1).reshape(-1, 3)
    if split == 5:
        # corner c of a cell has offset bits (c >> 2, c >> 1, c) & 1 along (x, y, z)
        bits = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])
        odd = cells.sum(axis=1) % 2 == 1
        tets = []
        for t in _FIVE_TET:
            off = bits[t][None, :, :].repeat(len(cells), axis=0)
            off[odd, :, 0] = 1 - off[odd, :, 0]
            p = cells[:, None, :] + off
            tets.append(vid[p[..., 0], p[..., 1], p[..., 2]])
        return verts, orient_tets(verts, np.concatenate(tets))
    tets = []
    for perm in itertools.permutations(range(3)):
        corners = [np.zeros(3, dtype=int)]
        for axis in perm:
            step = corners[-1].copy()
            step[axis] += 1
            corners.append(step)
        c = [cells + off for off in corners]
        tets.append(np.stack([vid[p[:, 0], p[:, 1], p[:, 2]] for p in c], axis=1))
    tets = np.concatenate(tets)
    return verts, orient_tets(verts, tets)


def orient_tets(verts, tets):
    tets = np.array(tets, dtype=np.int64)
    neg = np.linalg.det(edge_matrix(verts, tets)) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return tets


def boundary_faces(tets):
    """Triangles that belong to exactly one tet, wound outward."""
    local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    faces = tets[:, local].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inv.ravel()] == 1]


def lumped_masses(verts, tets, density):
    vol = np.abs(np.linalg.det(edge_matrix(verts, tets))) / 6.0
    return np.bincount(tets.ravel(), weights=np.repeat(density * vol / 4.0, 4), minlength=len(verts))


def solid_scene(name, verts, tets, stiffness, density, pins):
    cs = ConstraintSet.arap_from_rest(verts, tets, stiffness)
    mass = lumped_masses(verts, tets, density)
    pins = np.asarray(pins, dtype=np.int64)
    return SceneDef(name, np.asarray(verts, dtype=np.float64), cs, _finish_masses(mass, pins), pins,
                    stiffness, density, mass, faces=boundary_faces(tets), tets=tets).validate()


def build_beam(nx, ny, nz, spacing=0.05, stiffness=1e12, density=1000.0, name=None, split=6):
    """Cantilever along +x with its x = 0 face pinned."""
    if min(nx, ny, nz) < 1:
        raise ValueError("lattice counts must be at least 1")
    verts, tets = lattice_tets(nx, ny, nz, spacing, split)
    pins = np.flatnonzero(verts[:, 0] == 0.0)
    return solid_scene(name or f"beam{nx}x{ny}x{nz}", verts, tets, stiffness, density, pins)


def write_tet_mesh(path, mesh: TetMesh):
    with open(path, "w") as f:
        f.write("# tet mesh: counts, then 'i x y z' rows, then 'i a b c d' rows\n")
        f.write(f"{len(mesh.vertices)} {len(mesh.tets)}\n")
        for i, v in enumerate(mesh.vertices):
            f.write(f"{i} " + " ".join(repr(float(c)) for c in v) + "\n")
        for i, t in enumerate(mesh.tets):
            f.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")


def load_tet_mesh(path, degenerate_tol=1e-14) -> TetMesh:
    """Read the node/element text format written by :func:`write_tet_mesh`.

    Inverted tets are repaired by swapping their last two vertices;
    degenerate ones are dropped with a warning.
    """
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if s:
                rows.append((lineno, s.split()))
    if not rows:
        raise MeshFormatError(f"{path}: empty mesh file")

    def fail(lineno, msg):
        raise MeshFormatError(f"{path}:{lineno}: {msg}")

    lineno, head = rows[0]
    try:
        nv, nt = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        fail(lineno, "expected '<n_vertices> <n_tets>'")
    if len(rows) - 1 != nv + nt:
        fail(rows[-1][0], f"expected {nv} vertex and {nt} tet rows, found {len(rows) - 1} rows")
    verts = np.empty((nv, 3))
    tets = np.empty((nt, 4), dtype=np.int64)
    for r, (lineno, tok) in enumerate(rows[1:nv + 1]):
        try:
            if len(tok) != 4 or int(tok[0]) != r:
                raise ValueError
            verts[r] = [float(t) for t in tok[1:]]
        except ValueError:
            fail(lineno, f"expected vertex row '{r} x y z'")
    for r, (lineno, tok) in enumerate(rows[nv + 1:]):
        try:
            if len(tok) != 5 or int(tok[0]) != r:
                raise ValueError
            tets[r] = [int(t) for t in tok[1:]]
        except ValueError:
            fail(lineno, f"expected tet row '{r} a b c d'")
        if tets[r].min() < 0 or tets[r].max() >= nv:
            fail(lineno, "vertex index out of range")
    tets = orient_tets(verts, tets)
    vol = np.linalg.det(edge_matrix(verts, tets)) / 6.0
    scale = max(np.ptp(verts, axis=0).max(), 1e-300) ** 3 if nv else 1.0
    bad = vol <= degenerate_tol * scale
    if np.any(bad):
        log.warning("%s: dropping %d degenerate tets", path, int(bad.sum()))
    return TetMesh(verts, tets[~bad])


PRESETS = {
    "cloth16": lambda: (build_cloth(16, diagonals=False), {"dt": 3e-3, "omega_relax": 0.25}),
    "cloth32": lambda: (build_cloth(32, diagonals=False), {"dt": 3e-3, "omega_relax": 0.25}),
    "cloth64": lambda: (build_cloth(64, diagonals=False), {"dt": 3e-3, "omega_relax": 0.25}),
    "cloth128": lambda: (build_cloth(128, diagonals=False), {"dt": 3e-3, "omega_relax": 0.25}),
    "beam": lambda: (build_beam(30, 4, 4), {"dt": 1e-2, "omega_relax": 0.1}),
}


def preset(name):
    """(SceneDef, SimConfig overrides) for a named desk-scale scene."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


def _floats(s, n=None):
    vals = [float(t) for t in s.replace(",", " ").split()]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {s!r}")
    return vals


SIM_KEYS = {"solver": str, "dt": float, "frames": int, "maxiter": int, "tol": float,
            "omega_relax": float, "setup_interval": int, "seed": int, "time_budget": float,
            "damping": float}


def load_scene_file(path):
    """Parse an INI-style scene description; returns (SceneDef, sim overrides)."""
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise SceneFormatError(f"{path}: cannot read scene file")
    except configparser.Error as e:
        raise SceneFormatError(f"{path}: {e}") from None
    if "scene" not in cp:
        raise SceneFormatError(f"{path}: missing [scene] section")
    sec = cp["scene"]
    try:
        kind = sec.get("type", "cloth")
        stiffness = sec.getfloat("stiffness", 1e9)
        if kind == "cloth":
            N = sec.getint("grid", 16)
            spacing = sec.getfloat("spacing", 1.0 / N)
            pins = sec.get("pins", "corners")
            pins = pins if pins in ("corners", "none") else [int(t) for t in pins.split()]
            scene = build_cloth(N, spacing, stiffness, sec.getfloat("density", 1.0),
                                sec.getboolean("diagonals", True), pins, sec.get("name"))
        elif kind == "beam":
            nx, ny, nz = (int(v) for v in _floats(sec.get("lattice", "30 4 4"), 3))
            scene = build_beam(nx, ny, nz, sec.getfloat("spacing", 0.05), stiffness,
                               sec.getfloat("density", 1000.0), sec.get("name"))
        elif kind == "tetmesh":
            mesh_path = Path(path).parent / sec["mesh"]
            mesh = load_tet_mesh(mesh_path)
            pins = [int(t) for t in sec.get("pins", "").split()]
            scene = solid_scene(sec.get("name", mesh_path.stem), mesh.vertices, mesh.tets,
                                stiffness, sec.getfloat("density", 1000.0), pins)
        else:
            raise SceneFormatError(f"{path}: unknown scene type {kind!r}")
        sim = {k: conv(sec[k]) for k, conv in SIM_KEYS.items() if k in sec}
        for name in cp.sections():
            if not name.startswith("collider"):
                continue
            c = cp[name]
            ckind = c.get("kind")
            if ckind == "plane":
                scene.colliders.append(SdfCollider("plane", normal=_floats(c.get("normal", "0 1 0"), 3),
                                                   offset=c.getfloat("offset", 0.0)))
            elif ckind in ("sphere", "cylinder"):
                scene.colliders.append(SdfCollider(
                    ckind, center=_floats(c.get("center", "0 0 0"), 3), radius=c.getfloat("radius", 1.0),
                    axis=_floats(c.get("axis", "0 0 1"), 3) if ckind == "cylinder" else None))
            else:
                raise SceneFormatError(f"{path}: [{name}] has unknown kind {ckind!r}")
    except (ValueError, KeyError) as e:
        if isinstance(e, SceneFormatError):
            raise
        raise SceneFormatError(f"{path}: {e}") from None
    scene.sim.update(sim)
    return scene, dict(scene.sim)
