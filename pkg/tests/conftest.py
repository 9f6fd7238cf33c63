import numpy as np
import pytest
import scipy.sparse as sp

from mgpbd.constraints import ConstraintSet, ParticleState, assemble_system, build_pattern, evaluate
from mgpbd.scenes import build_cloth, preset
from mgpbd.sim import semi_euler
from mgpbd.sparse import SparseMatrix


def random_spd(n, density=0.1, seed=0, shift=1.0):
    rng = np.random.default_rng(seed)
    M = sp.random(n, n, density=density, random_state=rng, format="csr")
    M = M + M.T
    M = M + sp.diags(np.abs(M).sum(axis=1).A1 + shift)
    return SparseMatrix.from_scipy(M)


def random_aggregation(n, n_agg, rng):
    agg = np.concatenate([np.arange(n_agg), rng.integers(0, n_agg, n - n_agg)])
    rng.shuffle(agg)
    return agg


def injection(agg, n_agg):
    P = sp.csr_matrix((np.ones(len(agg)), (np.arange(len(agg)), agg)), shape=(len(agg), n_agg))
    return SparseMatrix.from_scipy(P)


def random_distance_set(rng, n_verts, m):
    pairs = set()
    while len(pairs) < m:
        a, b = sorted(rng.choice(n_verts, 2, replace=False))
        pairs.add((a, b))
    x = rng.normal(size=(n_verts, 3))
    cs = ConstraintSet.distance_from_rest(x, sorted(pairs), rng.uniform(0.0, 1e-2, m))
    return x + 0.1 * rng.normal(size=x.shape), cs


def random_arap_set(rng, n_verts, m):
    x = rng.normal(size=(n_verts, 3))
    tets = []
    while len(tets) < m:
        t = rng.choice(n_verts, 4, replace=False)
        Dm = np.stack([x[t[k]] - x[t[0]] for k in (1, 2, 3)], axis=1)
        if abs(np.linalg.det(Dm)) > 0.05:
            if np.linalg.det(Dm) < 0:
                t[[2, 3]] = t[[3, 2]]
            tets.append(t)
    cs = ConstraintSet.arap_from_rest(x, tets, rng.uniform(1.0, 10.0))
    return x + 0.1 * rng.normal(size=x.shape), cs


def dense_jacobian(cs, n_verts):
    J = np.zeros((cs.m, 3 * n_verts))
    for i, t in enumerate(cs.topology):
        for s, v in enumerate(t):
            J[i, 3 * v:3 * v + 3] += cs.grads[i, s]
    return J


def frame_system(scene, dt):
    """Dual matrix and right-hand side at the start of frame 0."""
    cs = scene.constraints
    cs.set_timestep(dt)
    st = ParticleState(scene.x.copy(), scene.inv_mass.copy())
    semi_euler(st, dt)
    cs.lam = np.zeros(cs.m)
    evaluate(st.x, cs)
    A = assemble_system(cs, st.inv_mass, build_pattern(cs))
    return A, -cs.C.copy()


@pytest.fixture(scope="session")
def cloth64_system():
    scene, over = preset("cloth64")
    return frame_system(scene, over["dt"])


@pytest.fixture(scope="session")
def cloth16_system():
    scene, over = preset("cloth16")
    return frame_system(scene, over["dt"])


@pytest.fixture
def small_cloth():
    return build_cloth(4)


ACCEPTANCE = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
