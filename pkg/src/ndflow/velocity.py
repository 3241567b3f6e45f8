"""Conditional quasi time-varying velocity field.

The field is a chain of ``K`` stationary sub-fields; sub-field ``j`` drives
the flow on the time interval ``[j/K, (j+1)/K)`` (the last one also owns
``t = 1``).  Each sub-field is a residual MLP whose tanh head bounds every
velocity component to (-1, 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch, TimeOutOfRange

CONDITIONING = ("concatenate", "multiply")


def condition(p_features, c, mode: str = "concatenate"):
    """Combine point features with a per-row shape code."""
    pf, cv = ad.value(p_features), ad.value(c)
    if mode == "multiply":
        if pf.shape[-1] != cv.shape[-1]:
            raise ShapeMismatch(f"multiply needs equal widths, got {pf.shape[-1]} and {cv.shape[-1]}")
        return ad.mul(p_features, c)
    if mode == "concatenate":
        if cv.ndim == 1 and pf.ndim == 1:
            return ad.concat([p_features, c])
        return ad.concat([p_features, c], axis=-1)
    raise ValueError(f"unknown conditioning mode {mode!r}")


@dataclass
class SubField:
    """One stationary stage: optional point lift (multiply mode) plus a trunk."""

    trunk: ad.MlpParams
    lift: ad.MlpParams | None = None

    def layers(self) -> list:
        out = []
        for p in (self.lift, self.trunk):
            if p is not None:
                out += list(zip(p.weights, p.biases))
        return out

    def arrays(self) -> list:
        return [a for W, b in self.layers() for a in (W, b)]


@dataclass
class AnalyticField:
    """Hand-written stationary field ``fn(points) -> velocities`` (no parameters)."""

    fn: Callable

    def layers(self) -> list:
        return []

    def arrays(self) -> list:
        return []


@dataclass
class VelocityField:
    sub_fields: list
    code_dim: int
    hidden_dim: int = 128
    conditioning: str = "concatenate"
    time_input: bool = False

    @property
    def K(self) -> int:
        return len(self.sub_fields)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need at least one sub-field")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"unknown conditioning {self.conditioning!r}")

    def arrays(self) -> list:
        return [a for sf in self.sub_fields for a in sf.arrays()]

    def named_layers(self, prefix: str = "vf") -> list:
        out = []
        for j, sf in enumerate(self.sub_fields):
            for l, (W, b) in enumerate(sf.layers()):
                out.append((f"{prefix}/k{j}/layer{l}", W, b))
        return out

    def stage_index(self, t: float) -> int:
        if not 0.0 <= t <= 1.0:
            raise TimeOutOfRange(f"t = {t} outside [0, 1]")
        return min(int(math.floor(t * self.K)), self.K - 1)

    def stage_velocity(self, j: int, p, c, t: float = 0.0, tape: ad.Tape | None = None):
        """Velocity of sub-field ``j`` at row-batched points ``p`` with per-row codes ``c``."""
        sf = self.sub_fields[j]
        if isinstance(sf, AnalyticField):
            return sf.fn(ad.value(p))
        pv = ad.value(p)
        n = pv.shape[0]
        c = _rows(c, n)
        x = p
        if self.time_input:
            x = ad.concat([p, np.full((n, 1), float(t))], axis=-1)
        if self.conditioning == "multiply":
            x = condition(ad.mlp_forward(sf.lift, x, tape), c, "multiply")
        else:
            x = condition(x, c, "concatenate")
        return ad.mlp_forward(sf.trunk, x, tape)


def _rows(c, n: int):
    cv = ad.value(c)
    if cv.ndim == 2:
        if cv.shape[0] != n:
            raise ShapeMismatch(f"{cv.shape[0]} codes for {n} points")
        return c
    return ad.take(ad.reshape(c, (1, -1)), np.zeros(n, dtype=np.int64))


def eval_velocity(vf: VelocityField, p, c, t: float, tape: ad.Tape | None = None):
    """Evaluate v(p, c, t) using sub-field ``min(floor(t K), K - 1)``.

    ``p`` may be one point (3,) or rows (N, 3); ``c`` one code or per-row codes.
    """
    j = vf.stage_index(t)
    single = np.ndim(ad.value(p)) == 1
    if single:
        p = ad.reshape(p, (1, 3))
    out = vf.stage_velocity(j, p, c, t, tape)
    return ad.reshape(out, (3,)) if single else out


def init_velocity_field(K: int = 4, code_dim: int = 16, hidden_dim: int = 128,
                        conditioning: str = "concatenate", time_input: bool = False,
                        rng: np.random.Generator | None = None, head_scale: float = 0.0,
                        beta: float = 100.0) -> VelocityField:
    """Random sub-fields: lift, two residual blocks and a tanh head.

    ``head_scale`` is the std of the output-layer weights; 0 starts from the
    zero field (identity flow).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    pin = 3 + (1 if time_input else 0)
    subs = []
    for _ in range(K):
        lift = None
        if conditioning == "multiply":
            lift = ad.init_mlp([pin, code_dim], ["identity"], rng, beta=beta)
            trunk_in = code_dim
        else:
            trunk_in = pin + code_dim
        H = hidden_dim
        trunk = ad.init_mlp([trunk_in, H, H, H, H, H, 3],
                            ["softplus"] * 5 + ["tanh"], rng, residual=((1, 2), (3, 4)), beta=beta)
        trunk.weights[-1] = rng.standard_normal((H, 3)) * head_scale
        subs.append(SubField(trunk, lift))
    return VelocityField(subs, code_dim, hidden_dim, conditioning, time_input)


def linear_field(A: np.ndarray) -> AnalyticField:
    A = np.asarray(A, dtype=np.float64)
    return AnalyticField(lambda p: p @ A.T)


def constant_field(v: Sequence[float]) -> AnalyticField:
    v = np.asarray(v, dtype=np.float64)
    return AnalyticField(lambda p: np.broadcast_to(v, p.shape).copy())


def analytic_velocity_field(fns: Sequence[AnalyticField], code_dim: int = 1) -> VelocityField:
    return VelocityField(list(fns), code_dim, hidden_dim=0)


def lipschitz_probe(vf: VelocityField, c, n_pairs: int = 2000, seed: int = 0,
                    radius: float = 0.05) -> np.ndarray:
    """Empirical Lipschitz constant of each sub-field over [-1, 1]^3.

    Half of the pairs are local (second point within ``radius``), half are
    independent uniform draws.
    """
    rng = np.random.default_rng(seed)
    n_loc = n_pairs // 2
    p1 = rng.uniform(-1.0, 1.0, size=(n_pairs, 3))
    p2 = rng.uniform(-1.0, 1.0, size=(n_pairs, 3))
    u = rng.standard_normal((n_loc, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    p2[:n_loc] = p1[:n_loc] + u * radius * rng.random((n_loc, 1))
    dist = np.linalg.norm(p1 - p2, axis=1)
    ok = dist > 0
    est = np.zeros(vf.K)
    for j in range(vf.K):
        t = (j + 0.5) / vf.K
        v1 = np.asarray(vf.stage_velocity(j, p1, c, t))
        v2 = np.asarray(vf.stage_velocity(j, p2, c, t))
        ratio = np.linalg.norm(v1 - v2, axis=1)[ok] / dist[ok]
        est[j] = ratio.max() if ratio.size else 0.0
    return est
