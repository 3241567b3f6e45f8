"""SDF training samples: generation and the NDFS binary format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import BadParams, BalanceFailure, IoError, ParseError
from .distance import mesh_query
from .mesh import TriMesh

MAGIC = b"NDFS"
VERSION = 1
SDF_BOUND = 2.0 * np.sqrt(3.0)


@dataclass
class SdfSamples:
    """Points in [-1, 1]^3 with ground-truth signed distances (negative inside)."""

    points: np.ndarray
    sdf: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.sdf = np.ascontiguousarray(self.sdf, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.sdf):
            raise BadParams("points and sdf lengths differ")

    def __len__(self):
        return len(self.sdf)

    def subset(self, idx) -> "SdfSamples":
        return SdfSamples(self.points[idx], self.sdf[idx])

    def to_bytes(self) -> bytes:
        rec = np.concatenate([self.points, self.sdf[:, None]], axis=1).astype("<f8")
        return MAGIC + struct.pack("<II", VERSION, len(self)) + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SdfSamples":
        if len(data) < 12 or data[:4] != MAGIC:
            raise ParseError("not an NDFS sample file")
        version, count = struct.unpack("<II", data[4:12])
        if version != VERSION:
            raise ParseError(f"unsupported NDFS version {version}")
        body = data[12:]
        if len(body) != count * 32:
            raise ParseError(f"NDFS body holds {len(body)} bytes, expected {count * 32}")
        rec = np.frombuffer(body, dtype="<f8").reshape(count, 4).astype(np.float64)
        return cls(rec[:, :3], rec[:, 3])


def save_samples(samples: SdfSamples, path) -> None:
    Path(path).write_bytes(samples.to_bytes())


def load_samples(path) -> SdfSamples:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from None
    return SdfSamples.from_bytes(data)


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples and their face indices."""
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles()[face]
    pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return pts, face


def sample_sdf(mesh: TriMesh, n_total: int = 8000, surface_noise=(0.01, 0.05),
               uniform_fraction: float = 0.1, seed: int = 0, max_rounds: int = 50) -> SdfSamples:
    """Draw ``n_total`` SDF samples, exactly half inside and half outside.

    Each round proposes ``n_total`` candidates: a ``uniform_fraction`` share
    uniform in the cube, the rest surface points jittered by Gaussian noise
    with the two standard deviations (split evenly).  Candidates leaving the
    cube are discarded.  The first ``n_total / 2`` negative and first
    ``n_total / 2`` non-negative candidates, in proposal order, are kept.
    """
    if n_total <= 0 or n_total % 2:
        raise BadParams("n_total must be a positive even number")
    if not 0.0 <= uniform_fraction <= 1.0:
        raise BadParams("uniform_fraction must lie in [0, 1]")
    half = n_total // 2
    query = mesh_query(mesh)
    rng = np.random.default_rng(seed)
    sig = np.asarray(surface_noise, dtype=np.float64)
    pts_in, pts_out, sdf_in, sdf_out = [], [], [], []
    have_in = have_out = 0
    for _ in range(max_rounds):
        n_uni = int(round(uniform_fraction * n_total))
        n_surf = n_total - n_uni
        surf, _ = sample_surface(mesh, n_surf, rng)
        std = np.where(np.arange(n_surf) % 2 == 0, sig[0], sig[1])
        cand = np.concatenate([surf + rng.standard_normal((n_surf, 3)) * std[:, None],
                               rng.uniform(-1.0, 1.0, size=(n_uni, 3))])
        cand = cand[np.all(np.abs(cand) <= 1.0, axis=1)]
        sdf = query.signed(cand)
        neg = sdf < 0
        if have_in < half:
            pts_in.append(cand[neg])
            sdf_in.append(sdf[neg])
            have_in += int(neg.sum())
        if have_out < half:
            pts_out.append(cand[~neg])
            sdf_out.append(sdf[~neg])
            have_out += int((~neg).sum())
        if have_in >= half and have_out >= half:
            points = np.concatenate([np.concatenate(pts_in)[:half], np.concatenate(pts_out)[:half]])
            values = np.concatenate([np.concatenate(sdf_in)[:half], np.concatenate(sdf_out)[:half]])
            return SdfSamples(points, values)
    raise BalanceFailure(f"only {have_in} inside / {have_out} outside after {max_rounds} rounds")
