import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgpbd.constraints import edge_matrix
from mgpbd.scenes import (PRESETS, MeshFormatError, SceneFormatError, SdfCollider, TetMesh,
                          boundary_faces, build_beam, build_cloth, cloth_edges, lattice_tets,
                          load_scene_file, load_tet_mesh, lumped_masses, preset, sdf_eval,
                          write_tet_mesh)


def brute_force_edges(N, diagonals=True):
    n = N + 1
    idx = lambda i, j: j * n + i
    out = set()
    for i, j in itertools.product(range(n), repeat=2):
        steps = [(1, 0), (0, 1)] + ([(1, 1), (-1, 1)] if diagonals else [])
        for di, dj in steps:
            if 0 <= i + di < n and 0 <= j + dj < n:
                out.add(tuple(sorted((idx(i, j), idx(i + di, j + dj)))))
    return out


def test_cloth_one_cell():
    s = build_cloth(1)
    assert len(s.x) == 4 and s.constraints.m == 6


@pytest.mark.parametrize("N", [2, 5])
@pytest.mark.parametrize("diagonals", [True, False])
def test_cloth_edges_match_enumeration(N, diagonals):
    got = {tuple(sorted(e)) for e in cloth_edges(N, diagonals).tolist()}
    assert got == brute_force_edges(N, diagonals)
    assert len(cloth_edges(N, diagonals)) == len(got)


def test_cloth_two_cells_count():
    s = build_cloth(2)
    assert len(s.x) == 9 and s.constraints.m == 20


def test_cloth64_closed_form():
    s = build_cloth(64)
    assert len(s.x) == 4225
    assert s.constraints.m == 2 * 64 * 65 + 2 * 64 ** 2
    assert build_cloth(64, diagonals=False).constraints.m == 2 * 64 * 65


def test_cloth_rest_state_and_mass():
    s = build_cloth(8, spacing=0.1, areal_density=2.0)
    assert np.allclose(s.constraints.rest_length[:2 * 8 * 9], 0.1)
    assert s.mass.sum() == pytest.approx(2.0 * 0.8 ** 2, rel=1e-12)
    assert list(s.pins) == [0, 8]
    assert np.all(s.inv_mass[s.pins] == 0) and np.all(s.inv_mass[2:8] > 0)
    assert s.constraints.alpha[0] == pytest.approx(1e-9)


def test_cloth_faces_cover_area():
    s = build_cloth(4)
    a, b, c = (s.x[s.faces[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum()
    assert area == pytest.approx(1.0)


def test_lattice_five_split_one_cell():
    v, t = lattice_tets(1, 1, 1, 1.0, split=5)
    vol = np.linalg.det(edge_matrix(v, t)) / 6
    assert len(t) == 5 and np.all(vol > 0) and vol.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("split", [5, 6])
def test_lattice_volume_and_conformity(split):
    v, t = lattice_tets(10, 2, 2, 0.3, split)
    vol = np.linalg.det(edge_matrix(v, t)) / 6
    assert len(t) == 40 * split
    assert np.all(vol > 0)
    assert vol.sum() == pytest.approx(40 * 0.3 ** 3, rel=1e-12)
    # a conforming mesh exposes exactly two triangles per boundary square
    assert len(boundary_faces(t)) == 2 * 2 * (10 * 2 + 10 * 2 + 2 * 2)


def test_beam_preset_proportions():
    s, over = preset("beam")
    tets, verts = s.constraints.m, len(s.x)
    assert abs(tets - 2900) <= 0.2 * 2900
    assert abs(verts - 800) <= 0.2 * 800
    assert np.all(s.x[s.pins, 0] == 0.0)
    assert over["omega_relax"] == 0.1


def test_beam_masses_sum_to_density_volume():
    s = build_beam(6, 2, 3, spacing=0.1, density=500.0)
    assert s.mass.sum() == pytest.approx(500.0 * 6 * 2 * 3 * 0.001, rel=1e-10)
    assert np.allclose(s.constraints.alpha, 1.0 / (1e12 * s.constraints.rest_volume))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lumped_masses_sum(seed):
    rng = np.random.default_rng(seed)
    v, t = lattice_tets(*rng.integers(1, 4, 3), spacing=float(rng.uniform(0.1, 2)))
    v = v + 0.05 * rng.normal(size=v.shape)
    rho = float(rng.uniform(1, 1000))
    vol = np.abs(np.linalg.det(edge_matrix(v, t))).sum() / 6
    assert lumped_masses(v, t, rho).sum() == pytest.approx(rho * vol, rel=1e-10)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_valid(name):
    s, over = preset(name)
    s.validate()
    assert over["dt"] > 0


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("bunny")


def test_set_stiffness():
    s = build_cloth(2)
    s.set_stiffness(1e4)
    assert np.allclose(s.constraints.alpha, 1e-4)
    b = build_beam(2, 1, 1)
    b.set_stiffness(1e6)
    assert np.allclose(b.constraints.alpha * b.constraints.rest_volume, 1e-6)


def write_text(path, text):
    path.write_text(text)
    return path


def test_single_tet_file(tmp_path):
    p = write_text(tmp_path / "t.mesh", "4 1\n0 0 0 0\n1 2 0 0\n2 0 2 0\n3 0 0 2\n0 0 1 2 3\n")
    m = load_tet_mesh(p)
    assert m.vertices.shape == (4, 3) and m.tets.shape == (1, 4)
    assert m.volumes[0] == pytest.approx(8 / 6)


def test_inverted_tet_is_repaired(tmp_path):
    p = write_text(tmp_path / "t.mesh", "# inverted\n4 1\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n0 0 2 1 3\n")
    m = load_tet_mesh(p)
    assert m.volumes[0] == pytest.approx(1 / 6)


def test_degenerate_tet_dropped(tmp_path, caplog):
    p = write_text(tmp_path / "t.mesh", "4 2\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n0 0 1 2 3\n1 0 1 2 2\n")
    m = load_tet_mesh(p)
    assert len(m.tets) == 1


def test_mesh_round_trip(tmp_path):
    v, t = lattice_tets(3, 2, 2, 0.37)
    v = v + 0.01 * np.random.default_rng(0).normal(size=v.shape)
    mesh = TetMesh(v, t)
    write_tet_mesh(tmp_path / "m.mesh", mesh)
    back = load_tet_mesh(tmp_path / "m.mesh")
    assert np.array_equal(back.vertices, v) and np.array_equal(back.tets, t)


@pytest.mark.parametrize("text, where", [
    ("", None),
    ("x y\n", ":1:"),
    ("2 0\n0 0 0 0\n", ":2:"),
    ("1 0\n0 0 0 zero\n", ":2:"),
    ("4 1\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n0 0 1 2 9\n", ":6:"),
])
def test_mesh_parse_errors(tmp_path, text, where):
    p = write_text(tmp_path / "bad.mesh", text)
    with pytest.raises(MeshFormatError) as e:
        load_tet_mesh(p)
    if where:
        assert where in str(e.value)


def test_sdf_examples():
    d, g = sdf_eval(SdfCollider("plane", normal=(0, 1, 0)), [0.0, 3.0, 0.0])
    assert d == pytest.approx(3.0) and np.allclose(g, [0, 1, 0])
    d, g = sdf_eval(SdfCollider("sphere", radius=1.0), [2.0, 0.0, 0.0])
    assert d == pytest.approx(1.0) and np.allclose(g, [1, 0, 0])
    d, g = sdf_eval(SdfCollider("cylinder", axis=(0, 0, 1), radius=1.0), [0.0, 2.0, 5.0])
    assert d == pytest.approx(1.0) and np.allclose(g, [0, 1, 0])


def test_sdf_medial_fallbacks():
    _, g = sdf_eval(SdfCollider("sphere"), [0.0, 0.0, 0.0])
    assert np.allclose(g, [0, 1, 0])
    _, g = sdf_eval(SdfCollider("cylinder", axis=(1, 1, 0)), [3.0, 3.0, 0.0])
    assert np.linalg.norm(g) == pytest.approx(1.0) and abs(g @ np.array([1, 1, 0])) < 1e-12


def test_collider_validation():
    with pytest.raises(ValueError):
        SdfCollider("cone")
    with pytest.raises(ValueError):
        SdfCollider("sphere", radius=-1.0)
    with pytest.raises(ValueError):
        SdfCollider("plane", normal=(0, 0, 0))


colliders = st.sampled_from([
    SdfCollider("plane", normal=(0.2, 1.0, -0.3), offset=0.4),
    SdfCollider("sphere", center=(0.1, -0.2, 0.3), radius=0.7),
    SdfCollider("cylinder", center=(0.0, 0.5, 0.0), axis=(1.0, 0.0, 1.0), radius=0.4),
])


@settings(max_examples=60, deadline=None)
@given(colliders, st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_sdf_gradient_finite_differences(c, x):
    x = np.array(x)
    d, g = sdf_eval(c, x)
    if c.kind != "plane":
        q = x - c.center
        if c.kind == "cylinder":
            q = q - (q @ c.axis) * c.axis
        if np.linalg.norm(q) < 1e-2:
            return
    h = 1e-6
    fd = np.array([(sdf_eval(c, x + h * e)[0] - sdf_eval(c, x - h * e)[0]) / (2 * h) for e in np.eye(3)])
    assert np.allclose(fd, g, atol=1e-6)
    assert np.linalg.norm(g) == pytest.approx(1.0)


def test_scene_file_cloth_with_colliders(tmp_path):
    p = write_text(tmp_path / "s.ini", """
[scene]
type = cloth
grid = 6
diagonals = false
stiffness = 1e6
dt = 0.005
frames = 3

[collider.ground]
kind = plane
normal = 0 1 0
offset = -0.5

[collider.ball]
kind = sphere
center = 0.5 -0.3 0.5
radius = 0.2
""")
    scene, sim = load_scene_file(p)
    assert scene.grid == 6 and scene.constraints.m == 2 * 6 * 7
    assert sim == {"dt": 0.005, "frames": 3}
    assert [c.kind for c in scene.colliders] == ["plane", "sphere"]
    assert np.allclose(scene.constraints.alpha, 1e-6)


def test_scene_file_tetmesh(tmp_path):
    v, t = lattice_tets(2, 1, 1, 0.5)
    write_tet_mesh(tmp_path / "b.mesh", TetMesh(v, t))
    p = write_text(tmp_path / "s.ini", "[scene]\ntype = tetmesh\nmesh = b.mesh\npins = 0 1\n")
    scene, _ = load_scene_file(p)
    assert scene.constraints.kind == "arap" and list(scene.pins) == [0, 1]


@pytest.mark.parametrize("text", [
    "[other]\nx = 1\n",
    "[scene]\ntype = blob\n",
    "[scene]\ntype = cloth\ngrid = many\n",
    "[scene]\ntype = cloth\n[collider.a]\nkind = torus\n",
    "not an ini file",
])
def test_scene_file_errors(tmp_path, text):
    p = write_text(tmp_path / "s.ini", text)
    with pytest.raises(SceneFormatError):
        load_scene_file(p)
