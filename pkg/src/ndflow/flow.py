"""Integration of the diffeomorphic flow and its inverse.

The forward map solves ``dx/dt = v(x, c, t)`` from ``t = 0``; the inverse
solves the time-reversed problem ``dx/ds = -v(x, c, 1 - s)``, which for the
stage-wise field means running the stages in reverse order with negated
velocities.  Every stage boundary is a restart point, so no Runge-Kutta
step ever straddles the jump of the piecewise-constant-in-time field.

When a tape is supplied all solver arithmetic is recorded, which gives
exact gradients of the computed trajectory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteState, StepBudgetExceeded, TimeOutOfRange
from .velocity import VelocityField, analytic_velocity_field

RK4_FIXED = "rk4_fixed"
RKF45 = "rkf45_adaptive"

# Fehlberg 4(5) tableau
_F_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_F_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_F_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)
_F_B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)


@dataclass
class SolverConfig:
    kind: str = RK4_FIXED
    steps_per_stage: int = 8
    tolerance: float = 1e-5
    max_evals: int = 200_000

    def __post_init__(self):
        if self.kind not in (RK4_FIXED, RKF45):
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.steps_per_stage < 1:
            raise ValueError("steps_per_stage must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class FlowTrajectory:
    """Positions at checkpoint times; ``points[0]`` are the inputs."""

    times: list
    points: list
    evals: int = 0

    def at(self, t: float):
        for tt, p in zip(self.times, self.points):
            if abs(tt - t) < 1e-12:
                return p
        raise KeyError(f"time {t} not checkpointed")

    @property
    def end(self):
        return self.points[-1]


class _Counter:
    def __init__(self, budget: int):
        self.n = 0
        self.budget = budget

    def tick(self, rows: int = 1):
        self.n += 1
        if self.n > self.budget:
            raise StepBudgetExceeded(f"more than {self.budget} field evaluations")


def _check_finite(x):
    if not np.all(np.isfinite(ad.value(x))):
        raise NonFiniteState("non-finite state during integration")


def _rk4_segment(f, x, ta: float, tb: float, n_steps: int, counter: _Counter):
    h = (tb - ta) / n_steps
    for i in range(n_steps):
        t = ta + i * h
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, ad.lincomb(x, (0.5 * h,), (k1,)))
        k3 = f(t + 0.5 * h, ad.lincomb(x, (0.5 * h,), (k2,)))
        k4 = f(t + h, ad.lincomb(x, (h,), (k3,)))
        for _ in range(4):
            counter.tick()
        x = ad.lincomb(x, (h / 6, h / 3, h / 3, h / 6), (k1, k2, k3, k4))
        _check_finite(x)
    return x


def _rkf45_segment(f, x, ta: float, tb: float, tol: float, counter: _Counter, h0: float):
    t = ta
    h = min(h0, tb - ta)
    span = tb - ta
    while t < tb - 1e-14 * max(1.0, abs(tb)):
        h = min(h, tb - t)
        ks = []
        for s in range(6):
            xs = x if s == 0 else ad.lincomb(x, tuple(h * a for a in _F_A[s]), ks[:s])
            ks.append(f(t + _F_C[s] * h, xs))
            counter.tick()
        err_vec = sum((b5 - b4) * ad.value(k) for b4, b5, k in zip(_F_B4, _F_B5, ks)) * h
        err = float(np.max(np.abs(err_vec))) if np.size(err_vec) else 0.0
        if not np.isfinite(err):
            raise NonFiniteState("non-finite error estimate")
        if err <= tol:
            x = ad.lincomb(x, tuple(h * b for b in _F_B4), ks)
            _check_finite(x)
            t = tb if tb - (t + h) < 1e-14 * max(1.0, abs(tb)) else t + h
        fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * (tol / err) ** 0.2))
        h = max(h * fac, 1e-9 * span)
    return x, h


def _segment_times(K: int, t_end: float, checkpoints: Sequence[float]) -> list:
    times = {0.0, float(t_end)}
    times.update(j / K for j in range(1, K) if j / K < t_end)
    for t in checkpoints:
        if not 0.0 < t <= t_end + 1e-12:
            raise TimeOutOfRange(f"checkpoint {t} outside (0, {t_end}]")
        times.add(min(float(t), t_end))
    out = sorted(times)
    # merge near-duplicates produced by float arithmetic
    merged = [out[0]]
    for t in out[1:]:
        if t - merged[-1] > 1e-12:
            merged.append(t)
    return merged


def _integrate(stage_fn: Callable, K: int, x0, t_end: float, cfg: SolverConfig,
               checkpoints: Sequence[float]) -> FlowTrajectory:
    times = _segment_times(K, t_end, checkpoints)
    counter = _Counter(cfg.max_evals)
    x = x0
    points = [x0]
    h_adapt = 1.0 / (K * 4)
    for ta, tb in zip(times[:-1], times[1:]):
        j = min(int(math.floor(ta * K + 1e-9)), K - 1)

        def f(t, y, _j=j):
            return stage_fn(_j, y, t)

        if cfg.kind == RK4_FIXED:
            n = max(1, int(math.ceil(cfg.steps_per_stage * (tb - ta) * K - 1e-9)))
            x = _rk4_segment(f, x, ta, tb, n, counter)
        else:
            x, h_adapt = _rkf45_segment(f, x, ta, tb, cfg.tolerance, counter, h_adapt)
        points.append(x)
    return FlowTrajectory(times, points, counter.n)


def integrate_forward(vf: VelocityField, c, points, t_end: float = 1.0, cfg: SolverConfig | None = None,
                      tape: ad.Tape | None = None, checkpoints: Sequence[float] = ()) -> FlowTrajectory:
    """Trajectory of ``dx/dt = v(x, c, t)``, ``x(0) = points``, up to ``t_end``.

    Stage boundaries and ``checkpoints`` are always included in the output times.
    """
    cfg = cfg or SolverConfig()
    if not 0.0 < t_end <= 1.0:
        raise TimeOutOfRange(f"t_end = {t_end} outside (0, 1]")
    single = np.ndim(ad.value(points)) == 1
    x0 = ad.reshape(points, (1, 3)) if single else points
    traj = _integrate(lambda j, y, t: vf.stage_velocity(j, y, c, t, tape), vf.K, x0, t_end, cfg, checkpoints)
    if single:
        traj.points = [ad.reshape(p, (3,)) for p in traj.points]
    return traj


def integrate_backward(vf: VelocityField, c, points, cfg: SolverConfig | None = None,
                       tape: ad.Tape | None = None, s_end: float = 1.0,
                       checkpoints: Sequence[float] = ()) -> FlowTrajectory:
    """Trajectory of the inverse flow ``dx/ds = -v(x, c, 1 - s)``."""
    cfg = cfg or SolverConfig()
    if not 0.0 < s_end <= 1.0:
        raise TimeOutOfRange(f"s_end = {s_end} outside (0, 1]")
    K = vf.K
    single = np.ndim(ad.value(points)) == 1
    x0 = ad.reshape(points, (1, 3)) if single else points

    def reversed_field(j, y, s):
        return ad.scale(vf.stage_velocity(K - 1 - j, y, c, 1.0 - s, tape), -1.0)

    traj = _integrate(reversed_field, K, x0, s_end, cfg, checkpoints)
    if single:
        traj.points = [ad.reshape(p, (3,)) for p in traj.points]
    return traj


def deform(vf: VelocityField, c, p, cfg: SolverConfig | None = None, tape: ad.Tape | None = None):
    """Map points from shape space to template space."""
    return integrate_forward(vf, c, p, 1.0, cfg, tape).end


def deform_inverse(vf: VelocityField, c, p, cfg: SolverConfig | None = None, tape: ad.Tape | None = None):
    """Map points from template space back to shape space."""
    return integrate_backward(vf, c, p, cfg, tape).end


def batched(fn: Callable, points: np.ndarray, batch: int = 4096) -> np.ndarray:
    """Apply a row-wise map in fixed-size chunks."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) <= batch:
        return np.asarray(fn(points))
    return np.concatenate([np.asarray(fn(points[i:i + batch])) for i in range(0, len(points), batch)])


# ---------------------------------------------------------------- verification

@dataclass
class LinearTestField:
    """``v = A p`` with exact flow ``expm(t A) p``."""

    A: np.ndarray
    expm: Callable | None = None

    def field(self) -> VelocityField:
        from .velocity import linear_field
        return analytic_velocity_field([linear_field(self.A)])

    def exact(self, p: np.ndarray, t: float = 1.0) -> np.ndarray:
        expm = self.expm
        if expm is None:
            from scipy.linalg import expm
        return p @ expm(t * np.asarray(self.A)).T


@dataclass
class ConstantTestField:
    v: np.ndarray

    def field(self) -> VelocityField:
        from .velocity import constant_field
        return analytic_velocity_field([constant_field(self.v)])

    def exact(self, p: np.ndarray, t: float = 1.0) -> np.ndarray:
        return p + t * np.asarray(self.v)


@dataclass
class OrderResult:
    order: float
    err_n: float
    err_2n: float
    exact: bool


def order_check(test_field, n: int = 8, points: np.ndarray | None = None,
                exact_tol: float = 1e-13) -> OrderResult:
    """Observed RK4 convergence order ``log2(err_n / err_2n)`` against an exact flow."""
    if points is None:
        points = np.random.default_rng(0).uniform(-0.9, 0.9, size=(64, 3))
    vf = test_field.field()
    ref = test_field.exact(points, 1.0)
    errs = []
    for steps in (n, 2 * n):
        cfg = SolverConfig(RK4_FIXED, steps_per_stage=steps)
        out = deform(vf, np.zeros(vf.code_dim), points, cfg)
        errs.append(float(np.max(np.abs(out - ref))))
    if max(errs) <= exact_tol:
        return OrderResult(float("nan"), errs[0], errs[1], True)
    return OrderResult(math.log2(errs[0] / errs[1]), errs[0], errs[1], False)
