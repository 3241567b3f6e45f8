"""Command-line front end: ``ndf <subcommand> ...``.

Configuration precedence is flag > config file > default, and the
``NDF_SEED`` environment variable overrides the configured seed.  Failures
print a single ``error <Category>: <message>`` line on stderr and exit
with status 1.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError, NdfError

log = logging.getLogger("ndflow")


# ---------------------------------------------------------------- configuration

@dataclass
class DataConfig:
    families: tuple = ("superquadric", "star")
    count: int = 25
    split: float = 0.8
    n_samples: int = 8000
    surface_noise: tuple = (0.01, 0.05)
    uniform_fraction: float = 0.1
    resolution: int = 3


@dataclass
class FitConfig:
    iters: int = 2400
    lr: float = 5e-2
    samples_per_iter: int | None = None
    clamp: float | None = None


@dataclass
class ReconConfig:
    grid_res: int = 64
    narrow_band: bool = False


@dataclass
class MetricsConfig:
    n_samples: int = 30000
    delta: float = 0.0


@dataclass
class TemplateConfig:
    grid_res: int = 64
    n_vertices: int = 2500


def _section_types():
    from .model import CurriculumSchedule, TrainConfig
    return {"train": TrainConfig, "schedule": CurriculumSchedule, "data": DataConfig, "fit": FitConfig,
            "reconstruct": ReconConfig, "metrics": MetricsConfig, "template": TemplateConfig}


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class RunConfig:
    seed: int = 0
    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        types = _section_types()
        for name, cls in types.items():
            self.sections.setdefault(name, cls())

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name, obj in self.sections.items():
            d = asdict(obj)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        types = _section_types()
        unknown = set(d) - set(types) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sections = {}
        for name, typ in types.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(typ)}
            bad = set(sub) - known
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                sections[name] = typ(**_tuplify(sub))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from None
        seed = d.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        return cls(seed, sections)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()


def load_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(str(exc)) from None
        cfg = RunConfig.loads(text)
    env = os.environ.get("NDF_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"NDF_SEED={env!r} is not an integer") from None
    return cfg


def _override(obj, **kw):
    for k, v in kw.items():
        if v is not None:
            setattr(obj, k, v)


# ---------------------------------------------------------------- helpers

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(str(exc)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _load_code(model, ref: str) -> tuple[str, np.ndarray]:
    """A code is a shape id from the checkpoint or a JSON file ``{"id", "code"}``."""
    if ref in model.ids:
        return ref, model.code(ref).copy()
    d = _read_json(ref)
    code = np.asarray(d["code"], dtype=np.float64)
    if code.shape != (model.velocity.code_dim,):
        raise ConfigError(f"code has shape {code.shape}, model expects ({model.velocity.code_dim},)")
    return d.get("id", Path(ref).stem), code


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig) -> dict:
    from .geomio import make_synthetic, random_params, sample_sdf, save_mesh, save_samples

    dc = cfg.data
    _override(dc, count=args.count, split=args.split)
    if args.family:
        dc.families = tuple(args.family)
    out = Path(args.out)
    try:
        (out / "meshes").mkdir(parents=True, exist_ok=True)
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from None
    rng = np.random.default_rng(cfg.seed)
    n_train = int(round(dc.count * dc.split))
    entries = []
    for i in range(dc.count):
        fam = dc.families[i % len(dc.families)]
        params = random_params(fam, rng)
        mesh = make_synthetic(fam, params, dc.resolution)
        sid = f"{fam}_{i:03d}"
        samples = sample_sdf(mesh, dc.n_samples, dc.surface_noise, dc.uniform_fraction, seed=cfg.seed * 100003 + i)
        mpath, spath = out / "meshes" / f"{sid}.obj", out / "samples" / f"{sid}.ndfs"
        save_mesh(mesh, mpath)
        save_samples(samples, spath)
        entries.append({"id": sid, "family": fam, "params": params, "split": "train" if i < n_train else "test",
                        "mesh": str(mpath.relative_to(out)), "samples": str(spath.relative_to(out)),
                        "mesh_sha256": _sha256(mpath), "samples_sha256": _sha256(spath)})
    manifest = {"seed": cfg.seed, "entries": entries}
    _write_json(out / "manifest.json", manifest)
    return {"manifest": str(out / "manifest.json"), "train": n_train, "test": dc.count - n_train}


def _dataset(data_dir, split: str):
    from .geomio import load_samples

    root = Path(data_dir)
    manifest = _read_json(root / "manifest.json")
    return [(e["id"], load_samples(root / e["samples"])) for e in manifest["entries"] if e["split"] == split]


def cmd_train(args, cfg: RunConfig) -> dict:
    from .model import save_checkpoint, train

    tc = cfg.train
    tc.seed = cfg.seed
    _override(tc, epochs=args.epochs)
    data = _dataset(args.data, "train")

    def progress(epoch, row):
        log.info("epoch %d recon %.6g reg %.6g", epoch, row["recon_loss"], row["reg_loss"])

    model, tlog = train(data, tc, cfg.schedule, progress)
    save_checkpoint(model, args.out)
    tlog.save_csv(Path(args.out) / "train_log.csv")
    return {"checkpoint": args.out, "final_recon_loss": float(tlog.recon[-1]) if len(tlog.rows) else None}


def cmd_fit(args, cfg: RunConfig) -> dict:
    from .geomio import load_samples
    from .infer import fit_code
    from .model import load_checkpoint

    fc = cfg.fit
    _override(fc, iters=args.iters, lr=args.lr)
    model = load_checkpoint(args.checkpoint)
    samples = load_samples(args.samples)
    res = fit_code(model, samples, fc.iters, fc.lr, seed=cfg.seed, samples_per_iter=fc.samples_per_iter,
                   clamp=fc.clamp)
    sid = args.id or Path(args.samples).stem
    _write_json(args.out, {"id": sid, "code": [float(x) for x in res.code], "loss": res.loss})
    res.save_csv(Path(args.out).with_suffix(".csv"))
    return {"code": args.out, "loss": res.loss}


def cmd_reconstruct(args, cfg: RunConfig) -> dict:
    from .geomio import save_mesh
    from .infer import reconstruct
    from .model import load_checkpoint

    rc = cfg.reconstruct
    _override(rc, grid_res=args.grid_res)
    model = load_checkpoint(args.checkpoint)
    _, code = _load_code(model, args.code)
    mesh = reconstruct(model, code, rc.grid_res, rc.narrow_band)
    save_mesh(mesh, args.out)
    return {"mesh": args.out, "vertices": mesh.n_vertices, "faces": mesh.n_faces}


def cmd_template(args, cfg: RunConfig) -> dict:
    from .geomio import save_mesh
    from .infer import extract_template
    from .model import load_checkpoint
    from .registration import remesh_cluster

    tc = cfg.template
    _override(tc, grid_res=args.grid_res, n_vertices=args.n_vertices)
    model = load_checkpoint(args.checkpoint)
    mesh = remesh_cluster(extract_template(model, tc.grid_res), tc.n_vertices, seed=cfg.seed)
    save_mesh(mesh, args.out)
    return {"mesh": args.out, "vertices": mesh.n_vertices, "faces": mesh.n_faces}


def cmd_register(args, cfg: RunConfig) -> dict:
    from .geomio import load_mesh
    from .model import load_checkpoint
    from .registration import register_mesh

    model = load_checkpoint(args.checkpoint)
    sid, code = _load_code(model, args.code)
    src = load_mesh(args.source)
    res = register_mesh(model, src, code, Path(args.source).stem, sid)
    report = args.report or str(Path(args.out).with_suffix(".json"))
    res.save(args.out, report)
    return {"mesh": args.out, "report": report}


def cmd_metrics(args, cfg: RunConfig) -> dict:
    from .geomio import load_mesh
    from .metrics import evaluate, format_table

    mc = cfg.metrics
    _override(mc, n_samples=args.n_samples, delta=args.delta)
    a, b = load_mesh(args.a), load_mesh(args.b)
    gt_vertices = b.vertices if args.p2p else None
    rep = evaluate(a, b, mc.n_samples, cfg.seed, mc.delta, gt_vertices)
    if args.out:
        try:
            Path(args.out).write_text(rep.to_json() + "\n")
        except OSError as exc:
            raise IoError(str(exc)) from None
    if args.table:
        print(format_table({Path(args.a).stem: rep}), file=sys.stderr)
    return json.loads(rep.to_json())


def cmd_label_transfer(args, cfg: RunConfig) -> dict:
    from .geomio import load_mesh
    from .model import load_checkpoint
    from .registration import load_labels, save_labels, transfer_labels

    model = load_checkpoint(args.checkpoint)
    sources = []
    for entry in args.source:
        parts = entry.split(",")
        if len(parts) != 3:
            raise ConfigError(f"--source expects mesh,labels,code; got {entry!r}")
        mesh = load_mesh(parts[0])
        sources.append((mesh, load_labels(parts[1]), _load_code(model, parts[2])[1]))
    target = load_mesh(args.target)
    _, code = _load_code(model, args.code)
    labels = transfer_labels(model, sources, target, code)
    save_labels(labels, args.out)
    return {"labels": args.out, "n_vertices": int(len(labels))}


def cmd_dump_config(args, cfg: RunConfig) -> dict | None:
    sys.stdout.write(cfg.dumps())
    return None


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "fit": cmd_fit, "reconstruct": cmd_reconstruct,
    "template": cmd_template, "register": cmd_register, "metrics": cmd_metrics,
    "label-transfer": cmd_label_transfer, "dump-config": cmd_dump_config,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndf", description="Neural diffeomorphic shape templates.")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--family", action="append", help="shape family (repeatable)")
    s.add_argument("--count", type=int)
    s.add_argument("--split", type=float, help="training fraction")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True, help="dataset directory from gen-data")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("fit", help="fit a code to SDF samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--samples", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--id")
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)

    s = sub.add_parser("reconstruct", help="mesh the zero level set for a code")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--code", required=True, help="shape id or code JSON")
    s.add_argument("--grid-res", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("template", help="extract and remesh the template")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--grid-res", type=int)
    s.add_argument("--n-vertices", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("register", help="carry a template mesh to a shape")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--code", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")

    s = sub.add_parser("metrics", help="compare two meshes")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--out")
    s.add_argument("--n-samples", type=int)
    s.add_argument("--delta", type=float)
    s.add_argument("--p2p", action="store_true", help="also report index-aligned vertex error")
    s.add_argument("--table", action="store_true", help="print a table to stderr")

    s = sub.add_parser("label-transfer", help="vote labels onto a target mesh")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source", action="append", required=True, help="mesh,labels.csv,code")
    s.add_argument("--target", required=True)
    s.add_argument("--code", required=True)
    s.add_argument("--out", required=True)

    sub.add_parser("dump-config", help="print the effective configuration")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        summary = COMMANDS[args.command](args, cfg)
    except NdfError as exc:
        print(f"error {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error {IoError.category}: {exc}", file=sys.stderr)
        return 1
    if summary is not None:
        print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
