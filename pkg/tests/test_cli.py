import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ndflow.cli import RunConfig, load_config, main
from ndflow.geomio import icosphere, load_mesh, save_mesh
from ndflow.metrics import si_ratio
from ndflow.model import TrainConfig, init_model, save_checkpoint

TINY = {
    "seed": 3,
    "data": {"count": 4, "split": 0.5, "n_samples": 256, "resolution": 2},
    "train": {"epochs": 3, "batch_size": 2, "code_dim": 4, "hidden_dim": 8, "template_hidden": 32,
              "K": 2, "steps_per_stage": 1, "template_fit_steps": 100},
    "fit": {"iters": 3, "samples_per_iter": 64},
    "reconstruct": {"grid_res": 24},
    "template": {"grid_res": 24, "n_vertices": 300},
    "metrics": {"n_samples": 500},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    return d


@pytest.fixture(scope="module")
def pipeline(workdir):
    """gen-data -> train once for the module; later steps run in the tests."""
    cfg = workdir / "cfg.json"
    assert main(["--config", str(cfg), "gen-data", "--out", str(workdir / "data")]) == 0
    assert main(["--config", str(cfg), "train", "--data", str(workdir / "data"), "--out", str(workdir / "ck")]) == 0
    return workdir


def test_gen_data_manifest(pipeline, capsys):
    m = json.loads((pipeline / "data" / "manifest.json").read_text())
    splits = [e["split"] for e in m["entries"]]
    assert splits.count("train") == 2 and splits.count("test") == 2
    for e in m["entries"]:
        mesh = load_mesh(pipeline / "data" / e["mesh"])
        assert mesh.is_watertight() and si_ratio(mesh) == 0.0
        assert _digest(pipeline / "data" / e["mesh"]) == e["mesh_sha256"]


def test_gen_data_split_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--count", 25, "--split", 0.8, "--out", tmp_path / "d",
                       "--family", "ellipsoid")
    assert code == 0
    summary = json.loads(out)
    assert summary["train"] == 20 and summary["test"] == 5


def test_gen_data_deterministic(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "--config", pipeline / "cfg.json", "gen-data", "--out", tmp_path / "again")
    assert code == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (pipeline / "data" / "manifest.json").read_bytes()


def test_superquadrics_are_clean(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--count", 4, "--family", "superquadric", "--out", tmp_path / "sq")
    assert code == 0
    for p in (tmp_path / "sq" / "meshes").glob("*.obj"):
        m = load_mesh(p)
        assert m.is_watertight() and si_ratio(m) == 0.0


def test_train_outputs(pipeline):
    ck = pipeline / "ck"
    for name in ("weights.ndfw", "weights.json", "codes.json", "config.json", "train_log.csv"):
        assert (ck / name).exists()
    assert (ck / "train_log.csv").read_text().splitlines()[0] == "epoch,recon_loss,reg_loss,lr"


def test_train_is_reproducible(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "--config", pipeline / "cfg.json", "train", "--data", pipeline / "data",
                     "--out", tmp_path / "ck2")
    assert code == 0
    for name in ("weights.ndfw", "codes.json", "train_log.csv"):
        assert _digest(tmp_path / "ck2" / name) == _digest(pipeline / "ck" / name)


def test_full_pipeline(pipeline, capsys):
    d, cfg = pipeline, pipeline / "cfg.json"
    manifest = json.loads((d / "data" / "manifest.json").read_text())
    test_entry = [e for e in manifest["entries"] if e["split"] == "test"][0]
    train_ids = [e["id"] for e in manifest["entries"] if e["split"] == "train"]

    assert run(capsys, "--config", cfg, "fit", "--checkpoint", d / "ck", "--samples",
               d / "data" / test_entry["samples"], "--out", d / "code.json")[0] == 0
    code = json.loads((d / "code.json").read_text())
    assert len(code["code"]) == 4 and (d / "code.csv").exists()

    assert run(capsys, "--config", cfg, "reconstruct", "--checkpoint", d / "ck", "--code", d / "code.json",
               "--out", d / "rec.obj")[0] == 0
    assert run(capsys, "--config", cfg, "reconstruct", "--checkpoint", d / "ck", "--code", train_ids[0],
               "--out", d / "rec_train.obj")[0] == 0

    rc, out, _ = run(capsys, "--config", cfg, "template", "--checkpoint", d / "ck", "--out", d / "tpl.obj")
    assert rc == 0 and abs(json.loads(out)["vertices"] - 300) <= 30

    assert run(capsys, "--config", cfg, "register", "--checkpoint", d / "ck", "--source", d / "tpl.obj",
               "--code", train_ids[1], "--out", d / "reg.obj")[0] == 0
    reg, tpl = load_mesh(d / "reg.obj"), load_mesh(d / "tpl.obj")
    assert np.array_equal(reg.faces, tpl.faces)
    assert json.loads((d / "reg.json").read_text())["target_id"] == train_ids[1]

    rc, out, _ = run(capsys, "--config", cfg, "metrics", d / "rec.obj", d / "data" / test_entry["mesh"],
                     "--out", d / "metrics.json", "--table")
    assert rc == 0 and json.loads(out)["cd"] >= 0 and (d / "metrics.json").exists()

    labels = d / "labels.csv"
    labels.write_text("vertex_index,label_id\n" + "".join(
        f"{i},{int(v[2] > 0)}\n" for i, v in enumerate(reg.vertices)))
    rc, out, _ = run(capsys, "--config", cfg, "label-transfer", "--checkpoint", d / "ck",
                     "--source", f"{d / 'reg.obj'},{labels},{train_ids[1]}",
                     "--target", d / "rec_train.obj", "--code", train_ids[0], "--out", d / "out_labels.csv")
    assert rc == 0 and json.loads(out)["n_vertices"] == load_mesh(d / "rec_train.obj").n_vertices


def test_metrics_identical_paths(tmp_path, capsys):
    save_mesh(icosphere(2), tmp_path / "s.obj")
    rc, out, _ = run(capsys, "metrics", tmp_path / "s.obj", tmp_path / "s.obj", "--n-samples", 1000)
    rep = json.loads(out)
    assert rc == 0 and rep["cd"] == 0.0 and rep["nc"] == 1.0 and rep["si_ratio"] == 0.0


def test_empty_surface_error(tmp_path, capsys):
    cfg = TrainConfig(code_dim=4, hidden_dim=8, template_hidden=8, K=1, template_fit_steps=0)
    m = init_model(cfg, ["a", "b"])
    m.template.weights[-1][...] = 0.0
    m.template.biases[-1][...] = 5.0
    save_checkpoint(m, tmp_path / "ck")
    rc, out, err = run(capsys, "reconstruct", "--checkpoint", tmp_path / "ck", "--code", "a",
                       "--grid-res", 16, "--out", tmp_path / "x.obj")
    assert rc != 0 and out == ""
    assert err.strip().splitlines()[-1].startswith("error EmptySurface:")


def test_missing_file_error(tmp_path, capsys):
    rc, _, err = run(capsys, "metrics", tmp_path / "nope.obj", tmp_path / "nope.obj")
    assert rc == 1 and err.startswith("error IoError:")


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochz": 3}}))
    rc, _, err = run(capsys, "--config", tmp_path / "c.json", "dump-config")
    assert rc == 1 and err.startswith("error ConfigError:")


def test_dump_config_round_trip(tmp_path, capsys):
    rc, out, _ = run(capsys, "--config", _write(tmp_path, TINY), "dump-config")
    assert rc == 0
    assert RunConfig.loads(out) == load_config(str(tmp_path / "c.json"))
    (tmp_path / "d.json").write_text(out)
    rc2, out2, _ = run(capsys, "--config", tmp_path / "d.json", "dump-config")
    assert out2 == out


def test_defaults_dump(capsys):
    rc, out, _ = run(capsys, "dump-config")
    assert rc == 0 and RunConfig.loads(out) == RunConfig()


def test_env_seed_override(monkeypatch, capsys):
    monkeypatch.setenv("NDF_SEED", "17")
    rc, out, _ = run(capsys, "dump-config")
    assert json.loads(out)["seed"] == 17
    monkeypatch.setenv("NDF_SEED", "x")
    rc, _, err = run(capsys, "dump-config")
    assert rc == 1 and "ConfigError" in err


def _write(tmp_path, obj):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(obj))
    return p
