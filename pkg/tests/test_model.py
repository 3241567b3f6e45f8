import math

import numpy as np
import pytest

from ndflow import autodiff as ad
from ndflow.errors import ConfigError
from ndflow.flow import SolverConfig, deform, integrate_forward
from ndflow.geomio import make_synthetic, sample_sdf
from ndflow.geomio.sampling import SdfSamples
from ndflow.model import (CurriculumSchedule, TrainConfig, ablation_variant, batch_losses,
                          curriculum_point_loss, init_model, load_checkpoint, predict_sdf, recon_loss,
                          reg_loss, save_checkpoint, train)
from ndflow.velocity import analytic_velocity_field, constant_field, eval_velocity

from oracles import (fd_gradients, implant_template, max_relative_error, mean_clamped_l1, micro_model,
                     sphere_sdf)

SMALL = dict(code_dim=4, hidden_dim=16, template_hidden=16, K=2, steps_per_stage=1, template_fit_steps=20)


def _tiny_dataset(n_shapes=2, n=256, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_shapes):
        mesh = make_synthetic("ellipsoid", {"axes": tuple(rng.uniform(0.7, 1.0, 3))}, 2)
        out.append((f"s{i}", sample_sdf(mesh, n, seed=seed + i)))
    return out


# ---------------------------------------------------------------- losses

def test_curriculum_loss_examples():
    assert curriculum_point_loss(0.03, 0.03, 0.01, 0.5) == 0.0
    assert curriculum_point_loss(0.105, 0.1, 0.01, 0.5, clamp=1.0) == 0.0
    # hard example: wrong side of the surface; the decimal inputs round, so allow one ulp
    v = curriculum_point_loss(-0.2, 0.1, 0.0, 0.5, clamp=1.0)
    assert abs(v - 0.45) <= math.ulp(0.45)
    # the same case on dyadic inputs is exact
    assert curriculum_point_loss(-0.25, 0.125, 0.0, 0.5, clamp=1.0) == 1.5 * 0.375


def test_curriculum_loss_clamps_and_weights():
    # both beyond the clamp: no loss
    assert curriculum_point_loss(0.5, 0.3, 0.0, 0.5) == 0.0
    # easy side: weight 1 - lam
    assert curriculum_point_loss(0.0625, 0.0, 0.0, 0.5) == 0.0625
    assert curriculum_point_loss(0.0, 0.0625, 0.0, 0.5) == 1.5 * 0.0625
    assert curriculum_point_loss(0.09375, 0.0625, 0.0, 0.5) == 0.5 * 0.03125


def test_reg_loss_examples():
    z = np.zeros((1, 3))
    assert reg_loss([(z, z)], np.zeros((1, 4)))[0] == 0.0
    v = reg_loss([(np.array([[0.1, 0.0, 0.0]]), z)], np.zeros((1, 4)))[0]
    assert abs(v - 0.005) <= math.ulp(0.005)
    assert reg_loss([(np.array([[0.125, 0.0, 0.0]]), z)], np.zeros((1, 4)))[0] == 0.0078125
    assert reg_loss([(np.array([[1.0, 0.0, 0.0]]), z)], np.zeros((1, 4)))[0] == 0.21875
    # codes enter as squared norms
    assert reg_loss([(z, z)], np.array([[0.5, 0.0, 0.0, 0.0]]), code_norm=1)[0] == 0.25


def test_schedule_defaults_and_validation():
    s = CurriculumSchedule()
    assert s.params(0, 100, 1.0) == (0.025, 0.0)
    assert s.params(99, 100, 1.0) == (0.0, 0.5)
    assert s.params(0, 100, 0.5) == (0.025 * 1.5, 0.0)
    assert s.params(99, 100, 0.5)[0] == 0.0
    assert s.stage(30, 100) == 1 and s.stage(29, 100) == 0
    with pytest.raises(ConfigError):
        CurriculumSchedule((0.0, 0.5), (0.01, 0.02), (0.0, 0.1))
    with pytest.raises(ConfigError):
        CurriculumSchedule((0.0, 0.5), (0.01, 0.0), (0.2, 0.1))
    with pytest.raises(ConfigError):
        CurriculumSchedule((0.1,), (0.0,), (0.0,))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(timestamps=(0.5,))
    with pytest.raises(ConfigError):
        TrainConfig(lr_net=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "bogus": 1})
    cfg = TrainConfig(epochs=7, timestamps=(0.5, 1.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- composition

def test_zero_field_predicts_template():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    p = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    for c in (m.codes[0], np.ones(4)):
        assert np.array_equal(predict_sdf(m, p, c), m.template_sdf(p))


def test_analytic_composition():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    a = 0.2
    m.velocity = analytic_velocity_field([constant_field([a, 0, 0])], code_dim=4)
    implant_template(m, sphere_sdf(0.5))
    p = np.random.default_rng(1).uniform(-1, 1, (50, 3))
    expect = np.linalg.norm(p + [a, 0, 0], axis=1) - 0.5
    assert np.abs(predict_sdf(m, p, np.zeros(4)) - expect).max() < 1e-12


def test_prediction_is_deform_then_template():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    for sf in m.velocity.sub_fields:
        sf.trunk.weights[-1][...] = np.random.default_rng(2).normal(0, 0.3, sf.trunk.weights[-1].shape)
    p = np.random.default_rng(3).uniform(-1, 1, (40, 3))
    q = deform(m.velocity, m.codes[1], p, m.solver)
    assert np.array_equal(predict_sdf(m, p, m.codes[1]), m.template_sdf(q))
    # the template does not see the code
    q2 = deform(m.velocity, m.codes[0], p, m.solver)
    assert np.array_equal(m.template_sdf(q2), ad.value(ad.mlp_forward(m.template, q2)).reshape(-1))


def test_template_initialised_as_sphere():
    m = init_model(TrainConfig(**{**SMALL, "template_fit_steps": 100, "template_hidden": 32}), ["a", "b"])
    p = np.random.default_rng(4).uniform(-1, 1, (2000, 3))
    err = np.abs(m.template_sdf(p) - (np.linalg.norm(p, axis=1) - 0.6))
    assert err.mean() < 0.05


# ---------------------------------------------------------------- reconstruction loss

def test_recon_loss_zero_for_exact_template():
    m = init_model(TrainConfig(**SMALL), ["a", "b"])
    implant_template(m, sphere_sdf(0.5))
    mesh = make_synthetic("ellipsoid", {"axes": (1, 1, 1)}, 3)
    pts = np.random.default_rng(5).uniform(-1, 1, (100, 3))
    s = SdfSamples(pts, np.linalg.norm(pts, axis=1) - 0.5)
    assert mesh.n_faces > 0
    assert recon_loss(m, [(0, s), (1, s)], CurriculumSchedule.flat(), 0, 10) == 0.0


def test_timestamps_reuse_one_trajectory():
    cfg = TrainConfig(**{**SMALL, "K": 4, "steps_per_stage": 2})
    m = init_model(cfg, ["a", "b"])
    rng = np.random.default_rng(6)
    for sf in m.velocity.sub_fields:
        sf.trunk.weights[-1][...] = rng.normal(0, 0.3, sf.trunk.weights[-1].shape)
    p = rng.uniform(-0.8, 0.8, (1, 3))
    terms = batch_losses(m, np.array([0]), p, np.zeros(1), [(0.0, 0.0)] * 4)
    # each timestamp must equal a separate integration stopped there on the same step grid
    for t, pt in zip(cfg.timestamps, terms.points_t):
        alone = integrate_forward(m.velocity, m.codes[0], p, t, m.solver).end
        assert np.array_equal(pt, alone)


def test_flat_curriculum_is_clamped_l1_sum():
    m = init_model(TrainConfig(**{**SMALL, "timestamps": (1.0,)}), ["a", "b"])
    data = _tiny_dataset(2, 64)
    batch = [(0, data[0][1]), (1, data[1][1])]
    got = recon_loss(m, batch, CurriculumSchedule.flat(), 0, 1)
    pred = np.concatenate([predict_sdf(m, s.points, m.codes[i]) for i, s in batch])
    gt = np.concatenate([s.sdf for _, s in batch])
    assert abs(got - mean_clamped_l1(pred, gt, 0.1)) < 1e-15

    m2 = init_model(TrainConfig(**SMALL), ["a", "b"])
    got2 = recon_loss(m2, batch, CurriculumSchedule.flat(), 0, 1)
    ref = 0.0
    for t in m2.config.timestamps:
        pred = np.concatenate([m2.template_sdf(integrate_forward(m2.velocity, m2.codes[i], s.points, t, m2.solver).end)
                               for i, s in batch])
        ref += mean_clamped_l1(pred, gt, 0.1)
    assert abs(got2 - ref) < 1e-14


def test_full_loss_gradient_matches_finite_differences():
    m, idx, pts, sdf = micro_model()

    def loss(tape=None):
        return batch_losses(m, idx, pts, sdf, [(0.002, 0.3), (0.0, 0.5)], tape, code_norm=4).total

    tape = ad.Tape()
    g = ad.backward(tape, loss(tape))
    arrays = m.network_arrays() + [m.codes]
    analytic = [g.param(a) for a in arrays]
    assert max_relative_error(analytic, fd_gradients(loss, arrays)) < 1e-5


def test_point_pair_term_adds_to_regularizer():
    m, idx, pts, sdf = micro_model()
    dirs = np.tile([1.0, 0.0, 0.0], (4, 1))
    base = batch_losses(m, idx, pts, sdf, [(0.0, 0.0)] * 2, code_norm=4)
    with_pp = batch_losses(m, idx, pts, sdf, [(0.0, 0.0)] * 2, code_norm=4, pp_dirs=dirs)
    assert with_pp.reg[0] > base.reg[0]
    assert with_pp.recon[0] == base.recon[0]


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def trained():
    cfg = TrainConfig(**SMALL, epochs=50, batch_size=2, use_curriculum=False, seed=3)
    data = _tiny_dataset(3, 256)
    return data, cfg, train(data, cfg)


def test_training_loss_trend(trained):
    _, _, (_, log) = trained
    smooth = np.convolve(log.recon, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]
    # windowed trend: each 5-epoch block improves on the previous one
    blocks = log.recon.reshape(-1, 5).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_training_is_deterministic(trained):
    data, cfg, (model, log) = trained
    model2, log2 = train(data, cfg)
    assert log.rows == log2.rows
    assert all(np.array_equal(a, b) for a, b in zip(model.network_arrays(), model2.network_arrays()))
    assert np.array_equal(model.codes, model2.codes)


def test_codes_do_not_collapse(trained):
    _, _, (model, _) = trained
    d = np.linalg.norm(model.codes[:, None] - model.codes[None], axis=-1)
    assert np.all(d[~np.eye(len(d), dtype=bool)] > 0)


def test_strong_regularizer_keeps_flow_near_identity():
    data = _tiny_dataset(2, 128)
    cfg = TrainConfig(**SMALL, epochs=15, batch_size=2, lambda_reg=1e6, seed=1)
    model, _ = train(data, cfg)
    p = np.concatenate([s.points for _, s in data])
    disp = [np.linalg.norm(deform(model.velocity, model.codes[i], p, model.solver) - p, axis=1).mean()
            for i in range(2)]
    assert max(disp) < 0.01


def test_training_needs_two_shapes():
    with pytest.raises(ConfigError):
        train(_tiny_dataset(1, 64), TrainConfig(**SMALL, epochs=1))


def test_log_csv(trained, tmp_path):
    _, _, (_, log) = trained
    log.save_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,recon_loss,reg_loss,lr" and len(lines) == 51
    assert float(lines[1].split(",")[1]) == log.rows[0]["recon_loss"]


def test_checkpoint_round_trip(trained, tmp_path):
    _, _, (model, _) = trained
    save_checkpoint(model, tmp_path / "ck")
    assert (tmp_path / "ck" / "weights.ndfw").read_bytes()[:4] == b"NDFW"
    back = load_checkpoint(tmp_path / "ck")
    assert back.ids == model.ids and np.array_equal(back.codes, model.codes)
    p = np.random.default_rng(7).uniform(-1, 1, (20, 3))
    assert np.array_equal(predict_sdf(back, p, back.codes[1]), predict_sdf(model, p, model.codes[1]))


def test_non_finite_loss_reports_shape():
    data = _tiny_dataset(2, 64)
    data[1][1].sdf[5] = np.nan
    from ndflow.errors import NonFiniteLoss
    with pytest.raises(NonFiniteLoss, match="s1"):
        train(data, TrainConfig(**SMALL, epochs=1, batch_size=2))


# ---------------------------------------------------------------- ablations

def test_ablation_variants():
    base = TrainConfig(**SMALL)
    sv = ablation_variant(base, "SV")
    m = init_model(sv, ["a", "b"])
    assert m.velocity.K == 1
    q8 = ablation_variant(base, "QTV", K=8)
    assert init_model(q8, ["a", "b"]).velocity.K == 8
    tv = ablation_variant(base, "TV")
    mt = init_model(tv, ["a", "b"])
    for sf in mt.velocity.sub_fields:
        sf.trunk.weights[-1][...] = np.random.default_rng(8).normal(0, 0.5, sf.trunk.weights[-1].shape)
    p = np.array([[0.1, 0.2, 0.3]])
    assert not np.array_equal(eval_velocity(mt.velocity, p, np.zeros(4), 0.1),
                              eval_velocity(mt.velocity, p, np.zeros(4), 0.9))
    assert not ablation_variant(base, "QTV").use_pp
    assert not ablation_variant(base, "QTV", use_curriculum=False).use_curriculum
    # the same number of solver steps per unit time
    for v in (sv, q8, tv):
        assert v.K * v.steps_per_stage >= base.K * base.steps_per_stage
    with pytest.raises(ConfigError):
        ablation_variant(base, "XV")


def test_solver_config_from_train_config():
    cfg = TrainConfig(steps_per_stage=3)
    assert cfg.solver == SolverConfig("rk4_fixed", 3, 1e-5)
