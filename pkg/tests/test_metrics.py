import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndflow.errors import CountMismatch, EmptyMesh
from ndflow.geomio import TriMesh, icosphere, tri_tri_intersect
from ndflow.metrics import (MetricsReport, chamfer, enmf_faces, enmf_ratio, evaluate, format_table,
                            normal_consistency, p2p_error, point_chamfer, point_normal_consistency,
                            si_ratio, surface_samples)

from oracles import brute_chamfer, brute_normal_consistency, brute_self_intersections, random_meshes


MESHES = random_meshes()


def _flip_one(mesh, k=0):
    F = mesh.faces.copy()
    F[k] = F[k, ::-1]
    return TriMesh(mesh.vertices, F)


def _plane(z, flip=False, n=1):
    V = np.array([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], float)
    F = np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(V, F[:, ::-1] if flip else F)


# ---------------------------------------------------------------- chamfer and normal consistency

@pytest.mark.parametrize("k", range(0, 20, 2))
def test_chamfer_matches_brute_force_exactly(k):
    a, b = MESHES[k], MESHES[k + 1]
    pa, _ = surface_samples(a, 60, seed=k)
    pb, _ = surface_samples(b, 60, seed=k)
    expect = brute_chamfer(pa, pb)
    assert point_chamfer(pa, pb) == expect
    assert point_chamfer(pa, pb, brute=True) == expect
    assert chamfer(a, b, n_samples=60, seed=k) == expect


@pytest.mark.parametrize("k", range(0, 20, 2))
def test_normal_consistency_matches_brute_force_exactly(k):
    a, b = MESHES[k], MESHES[k + 1]
    pa, na = surface_samples(a, 60, seed=k)
    pb, nb = surface_samples(b, 60, seed=k)
    expect = brute_normal_consistency(pa, na, pb, nb)
    assert point_normal_consistency(pa, na, pb, nb) == expect
    assert normal_consistency(a, b, n_samples=60, seed=k) == expect


def test_identical_meshes():
    s = icosphere(2)
    assert chamfer(s, s) == 0.0
    assert normal_consistency(s, s) == 1.0


def test_parallel_planes_chamfer():
    d = 0.05
    cd = chamfer(_plane(0.0), _plane(d))
    assert abs(cd - d * d) / (d * d) < 0.01
    assert abs(chamfer(_plane(0.0), _plane(d), squared=False) - d) / d < 0.01


def test_flipped_plane_normal_consistency():
    assert normal_consistency(_plane(0.0), _plane(0.0, flip=True), n_samples=2000) == 1.0


def test_chamfer_and_nc_symmetric():
    a, b = MESHES[0], MESHES[2]
    assert chamfer(a, b, 500) == chamfer(b, a, 500)
    assert normal_consistency(a, b, 500) == normal_consistency(b, a, 500)


def test_chamfer_deterministic_and_seeded():
    a, b = MESHES[4], MESHES[6]
    assert chamfer(a, b, 400, seed=1) == chamfer(a, b, 400, seed=1)
    assert chamfer(a, b, 400, seed=1) != chamfer(a, b, 400, seed=2)


def test_empty_mesh_sampling():
    with pytest.raises(EmptyMesh):
        chamfer(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), icosphere(1))


# ---------------------------------------------------------------- E-NMF

def test_enmf_sphere_clean():
    s = icosphere(3)
    assert enmf_ratio(s, 0.0) == 0.0


def test_enmf_flipped_face():
    s = icosphere(3)
    f = _flip_one(s, 17)
    flagged = enmf_faces(f, 0.0)
    assert enmf_ratio(f, 0.0) == 4 / s.n_faces
    nbrs = [i for i in range(s.n_faces) if i != 17 and len(set(s.faces[i]) & set(s.faces[17])) == 2]
    assert set(np.flatnonzero(flagged)) == {17, *nbrs}


def test_enmf_floor_threshold():
    for m in MESHES:
        assert enmf_ratio(m, -1.0) == 0.0


# ---------------------------------------------------------------- self-intersections

@pytest.mark.parametrize("k", range(20))
def test_si_matches_all_pairs(k):
    m = MESHES[k]
    oracle = brute_self_intersections(m, tri_tri_intersect)
    assert si_ratio(m) == float(oracle.mean())
    assert si_ratio(m, brute=True) == float(oracle.mean())


def test_si_sphere_zero():
    assert si_ratio(icosphere(3)) == 0.0


def _tet(offset):
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float) + offset
    F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return V, F


def test_si_interpenetrating_tetrahedra():
    V1, F1 = _tet(0.0)
    V2, F2 = _tet(0.25)
    m = TriMesh(np.vstack([V1, V2]), np.vstack([F1, F2 + 4]))
    oracle = brute_self_intersections(m, tri_tri_intersect)
    assert si_ratio(m) == float(oracle.mean())
    assert si_ratio(m) > 0


def test_si_folded_adjacent_pair_ignored():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.9, 0.0]], float)
    m = TriMesh(V, np.array([[0, 1, 2], [0, 1, 3]]))
    assert si_ratio(m) == 0.0


def test_tri_tri_predicate_cases():
    a = [np.array(v, float) for v in ([0, 0, 0], [1, 0, 0], [0, 1, 0])]
    piercing = [np.array(v, float) for v in ([0.2, 0.2, -1], [0.2, 0.2, 1], [0.3, 0.3, 1])]
    above = [np.array(v, float) for v in ([0, 0, 1], [1, 0, 1], [0, 1, 1])]
    coplanar = [np.array(v, float) for v in ([0.1, 0.1, 0], [0.6, 0.1, 0], [0.1, 0.6, 0])]
    assert tri_tri_intersect(*a, *piercing)
    assert not tri_tri_intersect(*a, *above)
    assert tri_tri_intersect(*a, *coplanar)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 19), st.integers(0, 10 ** 6))
def test_ratios_invariant_under_reindexing_and_rigid_motion(k, seed):
    m = MESHES[k]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m.n_vertices)
    inv = np.argsort(perm)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    V = (m.vertices[perm] @ Q.T) + rng.uniform(-1, 1, 3)
    F = inv[m.faces][rng.permutation(m.n_faces)]
    moved = TriMesh(V, F)
    assert si_ratio(moved) == si_ratio(m)
    assert enmf_ratio(moved, 0.0) == enmf_ratio(m, 0.0)


# ---------------------------------------------------------------- point error and reports

def test_p2p():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((30, 3))
    assert p2p_error(a, a) == 0.0
    assert abs(p2p_error(a + [0.0, 0.3, 0.4], a) - 0.5) < 1e-12
    b = rng.standard_normal((30, 3))
    assert p2p_error(a, b) == float(np.mean([np.linalg.norm(x - y) for x, y in zip(a, b)]))
    with pytest.raises(CountMismatch):
        p2p_error(a, b[:5])


def test_report_json_and_table():
    s = icosphere(2)
    r = evaluate(s, s, n_samples=500, gt_vertices=s.vertices)
    assert r.cd == 0.0 and r.nc == 1.0 and r.si_ratio == 0.0 and r.p2p == 0.0
    back = MetricsReport.from_json(r.to_json())
    assert back == r
    assert json.loads(r.to_json())["n_samples"] == 500
    lines = format_table({"ours": r, "other": MetricsReport(1.5e-3, 0.9, 2e-5, 0.0)}).splitlines()
    assert len(lines) == 3 and len({len(x) for x in lines}) == 1
    assert "1.5000" in lines[2] and "2.00" in lines[2]
