"""Template SDF composed with the learned deformation, its losses and training.

The signed distance of shape ``i`` at ``p`` is ``T(D(p, c_i))``: the point is
carried into template space by the flow and evaluated there.  Training
optimizes the velocity field, the template network and the per-shape codes
jointly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, IoError, NonFiniteLoss, ParseError
from .flow import RK4_FIXED, SolverConfig, integrate_forward
from .geomio.sampling import SdfSamples
from .optim import Adam
from .velocity import VelocityField, init_velocity_field

VARIANTS = ("SV", "QTV", "TV")


@dataclass
class CurriculumSchedule:
    """Piecewise-constant (eps, lam) over training progress.

    Stage ``k`` starts at epoch fraction ``boundaries[k]``.  For timestamps
    ``t < 1`` the tolerance is widened by ``(2 - t)``.
    """

    boundaries: tuple = (0.0, 0.3, 0.6, 0.8)
    eps: tuple = (0.025, 0.01, 0.0025, 0.0)
    lam: tuple = (0.0, 0.1, 0.2, 0.5)
    widen_early: bool = True

    def __post_init__(self):
        self.boundaries, self.eps, self.lam = tuple(self.boundaries), tuple(self.eps), tuple(self.lam)
        if not (len(self.boundaries) == len(self.eps) == len(self.lam)) or not self.boundaries:
            raise ConfigError("curriculum boundaries, eps and lam must have equal non-zero length")
        if self.boundaries[0] != 0.0 or any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ConfigError("curriculum boundaries must start at 0 and increase")
        if any(e2 > e1 for e1, e2 in zip(self.eps, self.eps[1:])):
            raise ConfigError("curriculum eps must be non-increasing")
        if any(l2 < l1 for l1, l2 in zip(self.lam, self.lam[1:])):
            raise ConfigError("curriculum lam must be non-decreasing")
        if any(e < 0 for e in self.eps) or any(not 0 <= l < 1 for l in self.lam):
            raise ConfigError("eps must be >= 0 and lam in [0, 1)")

    @classmethod
    def flat(cls) -> "CurriculumSchedule":
        """No tolerance zone and no hard-example weighting: plain clamped L1."""
        return cls((0.0,), (0.0,), (0.0,), False)

    def stage(self, epoch: int, epochs: int) -> int:
        frac = epoch / max(epochs, 1)
        k = 0
        for i, b in enumerate(self.boundaries):
            if frac >= b - 1e-12:
                k = i
        return k

    def params(self, epoch: int, epochs: int, t: float) -> tuple[float, float]:
        k = self.stage(epoch, epochs)
        eps = self.eps[k]
        if self.widen_early and t < 1.0:
            eps *= 2.0 - t
        return eps, self.lam[k]


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    lr_net: float = 5e-4
    lr_code: float = 1e-3
    lambda_reg: float = 1.0
    timestamps: tuple = (0.25, 0.5, 0.75, 1.0)
    sigma2: float = 1e4
    seed: int = 0
    # architecture
    code_dim: int = 16
    hidden_dim: int = 128
    template_hidden: int = 128
    K: int = 4
    conditioning: str = "concatenate"
    time_input: bool = False
    beta: float = 100.0
    template_radius: float = 0.6
    template_fit_steps: int = 100
    code_std: float = 0.01
    # loss details
    clamp: float = 0.1
    use_curriculum: bool = True
    use_pp: bool = False
    pp_delta: float = 0.01
    pp_weight: float = 1.0
    samples_per_step: int | None = None
    # solver used while training (and for reconstruction, which must match it)
    solver_kind: str = RK4_FIXED
    steps_per_stage: int = 2
    tolerance: float = 1e-5

    def __post_init__(self):
        self.timestamps = tuple(float(t) for t in self.timestamps)
        if self.lr_net <= 0 or self.lr_code <= 0:
            raise ConfigError("learning rates must be positive")
        if not self.timestamps or any(not 0.0 < t <= 1.0 for t in self.timestamps) or 1.0 not in self.timestamps:
            raise ConfigError("timestamps must lie in (0, 1] and include 1")
        if list(self.timestamps) != sorted(set(self.timestamps)):
            raise ConfigError("timestamps must be strictly increasing")
        if self.epochs < 0 or self.batch_size < 1 or self.K < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and K >= 1 required")
        if self.sigma2 <= 0 or self.lambda_reg < 0:
            raise ConfigError("sigma2 must be positive and lambda_reg non-negative")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.solver_kind, self.steps_per_stage, self.tolerance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timestamps"] = list(self.timestamps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def ablation_variant(cfg: TrainConfig, variant: str, use_curriculum: bool = True,
                     use_pp: bool = False, K: int | None = None) -> TrainConfig:
    """Configuration for one ablation row.

    ``SV`` uses one stationary field, ``QTV`` uses ``K`` stages (default: as
    configured) and ``TV`` feeds time to a single sub-field.  The number of
    Runge-Kutta steps per unit time is kept equal across variants.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    total_steps = cfg.K * cfg.steps_per_stage
    if variant == "QTV":
        k = K if K is not None else cfg.K
        time_input = False
    else:
        k, time_input = 1, variant == "TV"
    return replace(cfg, K=k, time_input=time_input, use_curriculum=use_curriculum, use_pp=use_pp,
                   steps_per_stage=max(1, math.ceil(total_steps / k)))


# ---------------------------------------------------------------- networks

def init_template(hidden: int = 128, rng: np.random.Generator | None = None, radius: float = 0.6,
                  beta: float = 100.0) -> ad.MlpParams:
    """Six dense layers, input re-injected at layer 3, initialized to ``|p| - radius``.

    Uses the geometric initialization of implicit-geometry networks: with
    near-ReLU activations the randomly initialized net approximates the
    sphere SDF.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    H = hidden
    widths = [3, H, H, H, H, H, 1]
    skip = (3,)
    Ws, bs = [], []
    for i in range(6):
        fan_in = widths[i] + (3 if i in skip else 0)
        out = widths[i + 1]
        if i == 5:
            W = rng.normal(math.sqrt(math.pi) / math.sqrt(widths[i]), 1e-4, size=(fan_in, out))
            b = np.full(out, -radius)
        else:
            W = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(out), size=(fan_in, out))
            if i in skip:
                W[widths[i]:] = 0.0
            b = np.zeros(out)
        Ws.append(W)
        bs.append(b)
    return ad.MlpParams(Ws, bs, ["softplus"] * 5 + ["identity"], skip_input=skip, beta=beta)


def fit_sphere(template: ad.MlpParams, radius: float, rng: np.random.Generator, steps: int = 100,
               n_points: int = 1024, lr: float = 1e-3) -> float:
    """Regress the template onto ``|p| - radius`` (L1 on random cube points).

    The geometric initialization is only roughly radial at desk widths; a
    short regression gives every run the same clean sphere to deform.
    Returns the final mean absolute error.
    """
    opt = Adam([(template.arrays(), lr)])
    err = np.inf
    for _ in range(steps):
        p = rng.uniform(-1.0, 1.0, size=(n_points, 3))
        target = np.linalg.norm(p, axis=1) - radius
        tape = ad.Tape()
        pred = ad.reshape(ad.mlp_forward(template, p, tape), (-1,))
        loss = ad.mean(ad.absolute(ad.sub(pred, target)))
        err = float(ad.value(loss)[0])
        opt.step(ad.backward(tape, loss).param)
        tape.release()
    return err


@dataclass(eq=False)
class NdfModel:
    velocity: VelocityField
    template: ad.MlpParams
    codes: np.ndarray
    ids: list
    config: TrainConfig

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] != len(self.ids):
            raise ConfigError("one code row per shape id required")
        if self.codes.shape[1] != self.velocity.code_dim:
            raise ConfigError("code width differs from the velocity field's code_dim")

    def code(self, key) -> np.ndarray:
        i = self.ids.index(key) if isinstance(key, str) else int(key)
        return self.codes[i]

    def network_arrays(self) -> list:
        return self.velocity.arrays() + self.template.arrays()

    def template_sdf(self, p, tape: ad.Tape | None = None):
        single = np.ndim(ad.value(p)) == 1
        x = ad.reshape(p, (1, 3)) if single else p
        out = ad.mlp_forward(self.template, x, tape)
        return ad.reshape(out, (-1,)) if not single else ad.reshape(out, ())

    @property
    def solver(self) -> SolverConfig:
        return self.config.solver

    def named_layers(self) -> list:
        layers = self.velocity.named_layers("vf")
        layers += [(f"template/layer{l}", W, b) for l, (W, b) in
                   enumerate(zip(self.template.weights, self.template.biases))]
        return layers


def init_model(cfg: TrainConfig, ids: Sequence[str], rng: np.random.Generator | None = None) -> NdfModel:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    vf = init_velocity_field(cfg.K, cfg.code_dim, cfg.hidden_dim, cfg.conditioning, cfg.time_input,
                             rng, head_scale=0.0, beta=cfg.beta)
    template = init_template(cfg.template_hidden, rng, cfg.template_radius, cfg.beta)
    if cfg.template_fit_steps:
        fit_sphere(template, cfg.template_radius, rng, cfg.template_fit_steps)
    codes = rng.normal(0.0, cfg.code_std, size=(len(ids), cfg.code_dim))
    return NdfModel(vf, template, codes, list(ids), cfg)


def predict_sdf(model: NdfModel, p, c, solver: SolverConfig | None = None, tape: ad.Tape | None = None):
    """``T(D(p, c))`` for one point or a batch of rows."""
    q = integrate_forward(model.velocity, c, p, 1.0, solver or model.solver, tape).end
    return model.template_sdf(q, tape)


# ---------------------------------------------------------------- losses

def curriculum_point_loss(pred, gt, eps: float, lam: float, clamp: float = 0.1):
    """Tolerance-zone L1 with hard-example weighting (elementwise)."""
    out = ad.curriculum_l1(pred, gt, eps, lam, clamp)
    return float(out) if np.ndim(out) == 0 else out


def huber(r, delta: float = 0.25):
    r = np.asarray(r, dtype=np.float64)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def reg_loss(trajectories: Sequence, codes, lambda_reg: float = 1.0, code_norm: float | None = None,
             delta: float = 0.25):
    """Huber penalty on displacements plus the squared code norms.

    ``trajectories`` is a list of ``(points_t, points_0)`` row pairs, one per
    timestamp; the Huber term is averaged over rows and summed over
    timestamps.  Code norms are divided by ``code_norm`` (default: the row
    count), matching the per-sample normalization of the data term.
    """
    terms = []
    n = None
    for pt, p0 in trajectories:
        d = ad.sub(pt, p0)
        n = ad.value(d).shape[0]
        terms.append(ad.scale(ad.total(ad.huber_norm(d, delta)), 1.0 / n))
    cv = ad.value(codes)
    cn = float(code_norm if code_norm is not None else (n or 1))
    code_term = ad.scale(ad.total(ad.row_sqnorm(ad.reshape(codes, (-1, cv.shape[-1])))), 1.0 / cn)
    out = code_term
    for t in terms:
        out = ad.add(out, t)
    return ad.scale(out, lambda_reg)


def recon_loss_rows(pred_rows, gt_rows, eps_rows, lam_rows, clamp: float):
    return ad.curriculum_l1(pred_rows, gt_rows, eps_rows, lam_rows, clamp)


@dataclass
class LossTerms:
    recon: object
    reg: object
    total: object
    per_row: np.ndarray
    points_t: list


def batch_losses(model: NdfModel, shape_index: np.ndarray, points: np.ndarray, sdf: np.ndarray,
                 eps_lam: Sequence[tuple[float, float]], tape: ad.Tape | None = None,
                 codes=None, code_norm: float | None = None, pp_dirs: np.ndarray | None = None) -> LossTerms:
    """Reconstruction and regularization losses for row-stacked samples.

    ``shape_index[r]`` selects the code of row ``r``; ``eps_lam[k]`` holds the
    curriculum parameters of timestamp ``k``.  One forward integration per
    row is shared by all timestamps.
    """
    cfg = model.config
    T = cfg.timestamps
    if codes is None:
        codes = tape.param(model.codes) if tape is not None else model.codes
    n = len(points)
    rows_c = ad.take(codes, shape_index)
    x0 = points
    if pp_dirs is not None:
        x0 = np.concatenate([points, points + cfg.pp_delta * pp_dirs])
        rows_c = ad.take(codes, np.concatenate([shape_index, shape_index]))
    traj = integrate_forward(model.velocity, rows_c, x0, 1.0, model.solver, tape, checkpoints=T)
    pts_t = [traj.at(t) for t in T]
    main_t = [ad.getitem(p, slice(0, n)) if pp_dirs is not None else p for p in pts_t]
    stacked = ad.concat(main_t, axis=0)
    pred = ad.reshape(model.template_sdf(stacked, tape), (-1,))
    gt = np.tile(sdf, len(T))
    eps_rows = np.repeat([e for e, _ in eps_lam], n)
    lam_rows = np.repeat([l for _, l in eps_lam], n)
    per = ad.curriculum_l1(pred, gt, eps_rows, lam_rows, cfg.clamp)
    recon = ad.scale(ad.total(per), 1.0 / n)
    used = np.unique(shape_index)
    reg = reg_loss([(p, points) for p in main_t], ad.take(codes, used), cfg.lambda_reg,
                   code_norm if code_norm is not None else n)
    if pp_dirs is not None:
        for p in pts_t:
            d = ad.sub(p, x0)
            diff = ad.sub(ad.getitem(d, slice(n, 2 * n)), ad.getitem(d, slice(0, n)))
            pp = ad.scale(ad.total(ad.row_sqnorm(diff)), cfg.pp_weight / (n * cfg.pp_delta ** 2))
            reg = ad.add(reg, pp)
    total = ad.add(recon, reg)
    per_rows = ad.value(per).reshape(len(T), n).sum(axis=0)
    return LossTerms(recon, reg, total, per_rows, [ad.value(p) for p in main_t])


def recon_loss(model: NdfModel, batch: Sequence[tuple[int, SdfSamples]], schedule: CurriculumSchedule,
               epoch: int, epochs: int | None = None, tape: ad.Tape | None = None):
    """Curriculum reconstruction loss of a batch of ``(shape index, samples)``.

    Summed over timestamps, averaged over samples.  Returns a tape node when
    a tape is given, else a float.
    """
    idx, pts, sdf = _stack(batch)
    epochs = epochs if epochs is not None else model.config.epochs
    eps_lam = [schedule.params(epoch, epochs, t) for t in model.config.timestamps]
    terms = batch_losses(model, idx, pts, sdf, eps_lam, tape)
    return terms.recon if tape is not None else float(ad.value(terms.recon)[0])


def _stack(batch):
    idx = np.concatenate([np.full(len(s), i, dtype=np.int64) for i, s in batch])
    pts = np.concatenate([s.points for _, s in batch])
    sdf = np.concatenate([s.sdf for _, s in batch])
    return idx, pts, sdf


# ---------------------------------------------------------------- training

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, recon, reg, lr):
        self.rows.append({"epoch": epoch, "recon_loss": recon, "reg_loss": reg, "lr": lr})

    @property
    def recon(self) -> np.ndarray:
        return np.array([r["recon_loss"] for r in self.rows])

    @property
    def reg(self) -> np.ndarray:
        return np.array([r["reg_loss"] for r in self.rows])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "recon_loss", "reg_loss", "lr"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def train(dataset: Sequence[tuple[str, SdfSamples]], cfg: TrainConfig,
          schedule: CurriculumSchedule | None = None, progress=None) -> tuple[NdfModel, TrainLog]:
    """Jointly fit velocity field, template and codes with Adam.

    ``dataset`` is a list of ``(shape id, samples)``.  Each step draws a batch
    of shapes (and, if ``samples_per_step`` is set, a random subset of each
    shape's samples).  Deterministic given ``cfg.seed``.
    """
    if len(dataset) < 2:
        raise ConfigError("training needs at least two shapes")
    counts = {len(s) for _, s in dataset}
    if len(counts) != 1:
        raise ConfigError(f"inconsistent sample counts {sorted(counts)}")
    S = counts.pop()
    if not cfg.use_curriculum:
        schedule = CurriculumSchedule.flat()
    elif schedule is None:
        schedule = CurriculumSchedule()
    rng = np.random.default_rng(cfg.seed)
    ids = [i for i, _ in dataset]
    model = init_model(cfg, ids, rng)
    opt = Adam([(model.network_arrays(), cfg.lr_net), ([model.codes], cfg.lr_code)])
    log = TrainLog()
    N = len(dataset)
    m = S if cfg.samples_per_step is None else min(cfg.samples_per_step, S)
    for epoch in range(cfg.epochs):
        eps_lam = [schedule.params(epoch, cfg.epochs, t) for t in cfg.timestamps]
        perm = rng.permutation(N)
        rec_sum = reg_sum = 0.0
        for start in range(0, N, cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            idx, pts, sdf, picks = [], [], [], []
            for i in batch:
                s = dataset[i][1]
                pick = np.arange(S) if m == S else np.sort(rng.choice(S, m, replace=False))
                idx.append(np.full(m, i, dtype=np.int64))
                pts.append(s.points[pick])
                sdf.append(s.sdf[pick])
                picks.append(pick)
            idx, pts, sdf = np.concatenate(idx), np.concatenate(pts), np.concatenate(sdf)
            dirs = None
            if cfg.use_pp:
                dirs = rng.standard_normal(pts.shape)
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            tape = ad.Tape()
            terms = batch_losses(model, idx, pts, sdf, eps_lam, tape, code_norm=len(batch) * S, pp_dirs=dirs)
            total = float(ad.value(terms.total)[0])
            if not np.isfinite(total):
                bad = np.flatnonzero(~np.isfinite(terms.per_row))
                where = ""
                if bad.size:
                    r = int(bad[0])
                    shape = int(idx[r])
                    where = f" (shape {ids[shape]!r}, sample {int(picks[list(batch).index(shape)][r % m])})"
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}{where}")
            grads = ad.backward(tape, terms.total)
            opt.step(grads.param)
            tape.release()
            rec_sum += float(ad.value(terms.recon)[0]) * len(batch)
            reg_sum += float(ad.value(terms.reg)[0]) * len(batch)
        log.append(epoch, rec_sum / N, reg_sum / N, cfg.lr_net)
        if progress is not None:
            progress(epoch, log.rows[-1])
    return model, log


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: NdfModel, directory) -> None:
    """Weights (NDFW + manifest), code table and configuration in ``directory``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        ad.save_weights(model.named_layers(), d / "weights.ndfw")
        codes = {k: [float(x) for x in model.codes[i]] for i, k in enumerate(model.ids)}
        (d / "codes.json").write_text(json.dumps({"ids": model.ids, "codes": codes}, indent=1) + "\n")
        (d / "config.json").write_text(json.dumps(model.config.to_dict(), indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def load_checkpoint(directory) -> NdfModel:
    d = Path(directory)
    try:
        cfg = TrainConfig.from_dict(json.loads((d / "config.json").read_text()))
        table = json.loads((d / "codes.json").read_text())
        layers = ad.load_weights(d / "weights.ndfw")
    except OSError as exc:
        raise IoError(str(exc)) from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"bad checkpoint: {exc}") from None
    ids = list(table["ids"])
    codes = np.array([table["codes"][k] for k in ids], dtype=np.float64).reshape(len(ids), cfg.code_dim)
    model = init_model(cfg, ids, np.random.default_rng(0))
    model.codes[...] = codes
    for name, W, b in model.named_layers():
        if name not in layers:
            raise ParseError(f"checkpoint lacks layer {name}")
        W2, b2 = layers[name]
        if W2.shape != W.shape or b2.shape != b.shape:
            raise ParseError(f"layer {name} has shape {W2.shape}, expected {W.shape}")
        W[...] = W2
        b[...] = b2
    return model


def code_table_from_json(path) -> dict:
    table = json.loads(Path(path).read_text())
    return {k: np.asarray(v, dtype=np.float64) for k, v in table["codes"].items()}
