"""Synthetic watertight shape families used as a stand-in for organ data.

Ellipsoids, superquadrics and stars are radial graphs over an icosphere:
every vertex of the unit icosphere is pushed along its own direction, so the
result keeps the icosphere connectivity, stays genus 0 and cannot
self-intersect.  The torus is a parametric (u, v) grid.
"""
from __future__ import annotations

import numpy as np

from ..errors import BadParams
from .mesh import TriMesh, normalize_mesh

FAMILIES = ("ellipsoid", "superquadric", "star", "torus")

_PHI = (1.0 + 5.0 ** 0.5) / 2.0


def icosphere(subdivisions: int = 3) -> TriMesh:
    """Unit icosphere with outward winding."""
    v = np.array([
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(v) + inv.reshape(3, -1)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[0], m[1], m[2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
        v = np.concatenate([v, mid])
    return TriMesh(v, f)


def _superquadric_radius(u: np.ndarray, axes, e1: float, e2: float) -> np.ndarray:
    """Radial scale putting direction ``u`` on the superquadric surface."""
    a, b, c = axes
    x, y, z = np.abs(u[:, 0]) / a, np.abs(u[:, 1]) / b, np.abs(u[:, 2]) / c
    xy = (x ** (2.0 / e2) + y ** (2.0 / e2)) ** (e2 / e1)
    F = xy + z ** (2.0 / e1)
    return F ** (-e1 / 2.0)


def _star_radius(u: np.ndarray, lobes: int, amplitude: float, axes) -> np.ndarray:
    phi = np.arctan2(u[:, 1], u[:, 0])
    sin2 = 1.0 - u[:, 2] ** 2
    base = _superquadric_radius(u, axes, 1.0, 1.0)
    return base * (1.0 + amplitude * np.cos(lobes * phi) * sin2)


def _torus(R: float, r: float, resolution: int) -> TriMesh:
    nu, nv = 8 * 2 ** resolution, 4 * 2 ** resolution
    u = 2 * np.pi * np.arange(nu) / nu
    w = 2 * np.pi * np.arange(nv) / nv
    uu, ww = np.meshgrid(u, w, indexing="ij")
    verts = np.stack([(R + r * np.cos(ww)) * np.cos(uu),
                      (R + r * np.cos(ww)) * np.sin(uu),
                      r * np.sin(ww)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * nv + j
    b = ((i + 1) % nu) * nv + j
    c = ((i + 1) % nu) * nv + (j + 1) % nv
    d = i * nv + (j + 1) % nv
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(verts, faces)


def _check_axes(axes):
    axes = tuple(float(x) for x in axes)
    if len(axes) != 3 or min(axes) <= 0:
        raise BadParams(f"axes must be three positive numbers, got {axes}")
    return axes


def radial_shape(family: str, params: dict, resolution: int = 3) -> TriMesh:
    """Unnormalized mesh for the radial families."""
    sphere = icosphere(resolution)
    u = sphere.vertices
    if family == "ellipsoid":
        axes = _check_axes(params.get("axes", (1.0, 1.0, 1.0)))
        scale = _superquadric_radius(u, axes, 1.0, 1.0)
    elif family == "superquadric":
        axes = _check_axes(params.get("axes", (1.0, 1.0, 1.0)))
        e1, e2 = float(params.get("e1", 1.0)), float(params.get("e2", 1.0))
        if not (0.4 <= e1 <= 2.5 and 0.4 <= e2 <= 2.5):
            raise BadParams(f"superquadric exponents must lie in [0.4, 2.5], got {(e1, e2)}")
        scale = _superquadric_radius(u, axes, e1, e2)
    elif family == "star":
        axes = _check_axes(params.get("axes", (1.0, 1.0, 1.0)))
        lobes = int(params.get("lobes", 5))
        amp = float(params.get("amplitude", 0.3))
        if lobes < 1 or not (0.0 <= amp < 0.5):
            raise BadParams(f"star needs lobes >= 1 and amplitude in [0, 0.5), got {(lobes, amp)}")
        scale = _star_radius(u, lobes, amp, axes)
    else:
        raise BadParams(f"unknown radial family {family!r}")
    return TriMesh(u * scale[:, None], sphere.faces)


def make_synthetic(family: str, params: dict | None = None, resolution: int = 3) -> TriMesh:
    """Generate a normalized watertight mesh from a parametric family.

    Parameters
    ----------
    family : {"ellipsoid", "superquadric", "star", "torus"}
    params : dict
        ``axes`` (three positive semi-axes) for the radial families;
        superquadric ``e1``, ``e2`` in [0.4, 2.5]; star ``lobes`` >= 1 and
        ``amplitude`` in [0, 0.5); torus ``R`` > ``r`` > 0.
    resolution : int
        Icosphere subdivision level (torus: 8*2**res by 4*2**res grid).
    """
    params = dict(params or {})
    if resolution < 0 or resolution > 7:
        raise BadParams(f"resolution {resolution} out of range [0, 7]")
    if family == "torus":
        R, r = float(params.get("R", 1.0)), float(params.get("r", 0.4))
        if not (0 < r < R):
            raise BadParams(f"torus needs 0 < r < R, got {(R, r)}")
        mesh = _torus(R, r, resolution)
    elif family in FAMILIES:
        mesh = radial_shape(family, params, resolution)
    else:
        raise BadParams(f"unknown family {family!r}; expected one of {FAMILIES}")
    return normalize_mesh(mesh)[0]


# default sampling ranges for randomly drawn family members
PARAM_RANGES = {
    "ellipsoid": {"axes": (0.6, 1.0)},
    "superquadric": {"axes": (0.65, 1.0), "e1": (0.6, 1.2), "e2": (0.6, 1.2)},
    "star": {"axes": (0.75, 1.0), "lobes": (3, 5), "amplitude": (0.05, 0.2)},
    "torus": {"R": (0.9, 1.1), "r": (0.3, 0.45)},
}


def random_params(family: str, rng: np.random.Generator, ranges: dict | None = None) -> dict:
    """Draw one parameter set uniformly from ``ranges`` (defaults: ``PARAM_RANGES``)."""
    rg = dict(PARAM_RANGES[family])
    rg.update(ranges or {})
    out = {}
    for key, (lo, hi) in rg.items():
        if key == "axes":
            out[key] = [float(x) for x in rng.uniform(lo, hi, size=3)]
        elif key == "lobes":
            out[key] = int(rng.integers(lo, hi + 1))
        else:
            out[key] = float(rng.uniform(lo, hi))
    return out
