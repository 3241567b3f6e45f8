import numpy as np
import pytest

from ndflow.errors import ClusterCollapse, NoLabels, ParseError, ShapeMismatch
from ndflow.geomio import (TriMesh, grid_points, grid_to_mesh, icosphere, load_mesh, make_synthetic, mesh_query,
                           sample_sdf)
from ndflow.metrics import enmf_ratio, si_ratio
from ndflow.model import TrainConfig, init_model, train
from ndflow.registration import (GEOMETRY_SOLVER, correspond, face_labels, from_template,
                                 interpolate_codes, label_iou, load_labels, majority_vote,
                                 register_mesh, remesh_cluster, save_labels, to_template,
                                 transfer_labels)
from ndflow.velocity import analytic_velocity_field, constant_field

SMALL = dict(code_dim=4, hidden_dim=16, template_hidden=16, K=2, steps_per_stage=1, template_fit_steps=20)


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(1)
    data = []
    for i in range(3):
        mesh = make_synthetic("ellipsoid", {"axes": tuple(rng.uniform(0.6, 1.0, 3))}, 2)
        data.append((f"s{i}", sample_sdf(mesh, 512, seed=i)))
    model, _ = train(data, TrainConfig(**SMALL, epochs=30, batch_size=3, seed=5))
    return model


@pytest.fixture(scope="module")
def sphere10k():
    return icosphere(5)


def _shift_model(a):
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    m.velocity = analytic_velocity_field([constant_field([a, 0, 0])], code_dim=4)
    return m


PTS = np.random.default_rng(2).uniform(-0.8, 0.8, (200, 3))


# ---------------------------------------------------------------- correspondence

def test_zero_field_correspondence_is_exact():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    assert np.array_equal(correspond(m, PTS, m.codes[0], m.codes[1]), PTS)


def test_self_correspondence(trained):
    c = trained.codes[0]
    assert np.abs(correspond(trained, PTS, c, c) - PTS).max() < 1e-3


def test_double_round_trip(trained):
    ci, cj = trained.codes[0], trained.codes[2]
    there = correspond(trained, PTS, ci, cj)
    assert np.abs(there - PTS).max() > 1e-3
    back = correspond(trained, there, cj, ci)
    assert np.abs(back - PTS).max() < 2e-3


def test_single_point(trained):
    p = PTS[3]
    out = correspond(trained, p, trained.codes[0], trained.codes[1])
    assert out.shape == (3,)
    assert np.allclose(out, correspond(trained, PTS, trained.codes[0], trained.codes[1])[3], atol=1e-12)


def test_geometry_solver_is_adaptive():
    assert GEOMETRY_SOLVER.kind == "rkf45_adaptive" and GEOMETRY_SOLVER.tolerance == 1e-5


# ---------------------------------------------------------------- registration

def test_zero_field_registration_is_identity():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    src = icosphere(2)
    res = register_mesh(m, src, m.codes[0])
    assert np.array_equal(res.mesh.vertices, src.vertices)
    assert np.array_equal(res.mesh.faces, src.faces)


def test_constant_field_registration_translates():
    a = 0.15
    src = icosphere(2)
    res = register_mesh(_shift_model(a), src, np.zeros(4))
    assert np.abs(res.mesh.vertices - (src.vertices - [a, 0, 0])).max() < 1e-12
    assert np.allclose(res.displacement, a, atol=1e-12)


def test_registration_keeps_connectivity_and_topology(trained, tmp_path):
    src = TriMesh(icosphere(3).vertices * 0.55, icosphere(3).faces)
    for k in range(3):
        res = register_mesh(trained, src, trained.codes[k], "template", f"s{k}")
        assert res.mesh.faces.tobytes() == src.faces.tobytes()
        assert res.mesh.euler_characteristic() == 2 and si_ratio(res.mesh) == 0.0
    res.save(tmp_path / "r.obj", tmp_path / "r.json")
    assert load_mesh(tmp_path / "r.obj").n_faces == src.n_faces
    rep = res.report()
    assert rep["target_id"] == "s2" and rep["displacement_max"] >= rep["displacement_mean"]


def test_registration_agrees_with_inverse_map(trained):
    src = icosphere(2)
    res = register_mesh(trained, src, trained.codes[1])
    direct = from_template(trained, src.vertices, trained.codes[1])
    assert np.abs(res.mesh.vertices - direct).max() < 1e-9


def test_template_maps_are_inverse(trained):
    c = trained.codes[1]
    assert np.abs(from_template(trained, to_template(trained, PTS, c), c) - PTS).max() < 1e-3


# ---------------------------------------------------------------- remeshing

def test_remesh_returns_copy_when_not_reducing(sphere10k):
    out = remesh_cluster(sphere10k, sphere10k.n_vertices)
    assert np.array_equal(out.vertices, sphere10k.vertices) and out is not sphere10k


@pytest.mark.parametrize("target", [2500, 5000])
def test_remesh_budget(sphere10k, target):
    out = remesh_cluster(sphere10k, target)
    assert abs(out.n_vertices - target) <= 0.1 * target
    assert out.is_watertight() and out.euler_characteristic() == 2
    assert si_ratio(out) == 0.0


def test_remesh_leaves_no_folds():
    # marching-cubes output of a lobed shape; raw clustering folds a few slivers here
    star = make_synthetic("star", {"lobes": 5, "amplitude": 0.25, "axes": (0.9, 0.8, 0.7)}, 3)
    res = 64
    mc = grid_to_mesh(mesh_query(star).signed(grid_points(res)).reshape(res, res, res))
    out = remesh_cluster(mc, 1500)
    assert enmf_ratio(out) == 0.0 and si_ratio(out) == 0.0
    assert out.euler_characteristic() == mc.euler_characteristic()
    # vertices stay on the input surface
    assert mesh_query(mc).unsigned(out.vertices).max() < 1e-9


def test_remesh_collapse():
    with pytest.raises(ClusterCollapse):
        remesh_cluster(icosphere(2), 5, max_tries=2)


# ---------------------------------------------------------------- labels

def test_majority_vote():
    votes = np.array([[1, 0, 2, 5], [1, 1, 3, 6], [0, 1, 3, 7]])
    assert majority_vote(votes).tolist() == [1, 1, 3, 5]


def test_majority_ties_follow_source_order():
    votes = np.array([[4, 2], [2, 4]])
    assert majority_vote(votes).tolist() == [4, 2]


def test_identity_transfer_copies_labels():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    mesh = icosphere(2)
    labels = (mesh.vertices[:, 2] > 0).astype(int)
    out = transfer_labels(m, [(mesh, labels, m.codes[0])], mesh, m.codes[0])
    assert np.array_equal(out, labels)


def test_three_sources_majority():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    mesh = icosphere(1)
    lab = np.zeros(mesh.n_vertices, int)
    sources = [(mesh, lab, m.codes[0]), (mesh, lab + 1, m.codes[0]), (mesh, lab + 1, m.codes[0])]
    assert np.all(transfer_labels(m, sources, mesh, m.codes[0]) == 1)


def test_transfer_under_trained_model(trained):
    mesh = icosphere(3)
    src = mesh.copy()
    labels = (src.vertices[:, 2] > 0).astype(int)
    target = register_mesh(trained, TriMesh(mesh.vertices * 0.6, mesh.faces), trained.codes[2]).mesh
    truth = (target.vertices[:, 2] > 0).astype(int)
    sources = []
    for k in range(2):
        s = register_mesh(trained, TriMesh(mesh.vertices * 0.6, mesh.faces), trained.codes[k]).mesh
        sources.append((s, (s.vertices[:, 2] > 0).astype(int), trained.codes[k]))
    pred = transfer_labels(trained, sources, target, trained.codes[2])
    assert label_iou(pred, truth) > 0.9
    assert labels.shape == truth.shape


def test_no_labels():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    mesh = icosphere(1)
    with pytest.raises(NoLabels):
        transfer_labels(m, [], mesh, m.codes[0])
    with pytest.raises(NoLabels):
        transfer_labels(m, [(mesh, -np.ones(mesh.n_vertices, int), m.codes[0])], mesh, m.codes[0])
    with pytest.raises(ShapeMismatch):
        transfer_labels(m, [(mesh, np.zeros(3, int), m.codes[0])], mesh, m.codes[0])


def test_face_labels_and_iou():
    F = np.array([[0, 1, 2], [1, 2, 3], [0, 2, 3]])
    assert face_labels(F, np.array([0, 1, 1, 2])).tolist() == [1, 1, 0]
    assert label_iou(np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1])) == 1.0
    assert label_iou(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1])) == pytest.approx((0.5 + 2 / 3) / 2)


def test_label_csv_round_trip(tmp_path):
    labels = np.array([0, 1, 1, 0, 2])
    save_labels(labels, tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "vertex_index,label_id"
    assert np.array_equal(load_labels(tmp_path / "l.csv"), labels)
    (tmp_path / "bad.csv").write_text("a,b\n0,1\n")
    with pytest.raises(ParseError):
        load_labels(tmp_path / "bad.csv")


# ---------------------------------------------------------------- interpolation

def test_interpolate_codes(trained):
    a, b = trained.codes[0], trained.codes[1]
    assert np.array_equal(interpolate_codes(a, b, 0.0), a)
    assert np.array_equal(interpolate_codes(a, b, 1.0), b)
    with pytest.raises(ShapeMismatch):
        interpolate_codes(a, b[:2], 0.5)


def test_interpolated_code_reconstructs_cleanly(trained):
    from ndflow.infer import reconstruct
    mesh = reconstruct(trained, interpolate_codes(trained.codes[0], trained.codes[1], 0.5), 32)
    assert si_ratio(mesh) == 0.0
