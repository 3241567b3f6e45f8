"""Mesh evaluation: Chamfer distance, normal consistency, E-NMF and SI ratios, point error."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import CountMismatch, EmptyMesh
from .geomio.distance import self_intersecting_faces
from .geomio.mesh import TriMesh
from .geomio.sampling import sample_surface

CD_SAMPLES = 30000


def surface_samples(mesh: TriMesh, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted samples and their face normals.

    The generator is keyed by ``seed`` and the mesh content, so a mesh gets
    the same samples whichever argument slot it occupies.
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    key = int.from_bytes(bytes.fromhex(mesh.digest()[:16]), "little")
    rng = np.random.default_rng([seed, key])
    pts, face = sample_surface(mesh, n, rng)
    return pts, mesh.face_normals[face]


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d * d).sum(axis=-1)


def nearest(a: np.ndarray, b: np.ndarray, brute: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Index in ``b`` of each point of ``a`` and the squared distance to it."""
    if brute:
        d2 = _sqdist(a[:, None, :], b[None, :, :])
        idx = np.argmin(d2, axis=1)
    else:
        _, idx = cKDTree(b).query(a)
    return idx, _sqdist(a, b[idx])


def point_chamfer(a: np.ndarray, b: np.ndarray, brute: bool = False, squared: bool = True) -> float:
    """Mean of the two directed mean nearest-neighbour distances."""
    _, dab = nearest(a, b, brute)
    _, dba = nearest(b, a, brute)
    if not squared:
        dab, dba = np.sqrt(dab), np.sqrt(dba)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def point_normal_consistency(a, na, b, nb, brute: bool = False) -> float:
    iab, _ = nearest(a, b, brute)
    iba, _ = nearest(b, a, brute)
    cab = np.abs((na * nb[iab]).sum(axis=1))
    cba = np.abs((nb * na[iba]).sum(axis=1))
    return 0.5 * (float(cab.mean()) + float(cba.mean()))


def chamfer(a: TriMesh, b: TriMesh, n_samples: int = CD_SAMPLES, seed: int = 0,
            brute: bool = False, squared: bool = True) -> float:
    """Symmetric mean squared nearest-neighbour distance between surface samples."""
    pa, _ = surface_samples(a, n_samples, seed)
    pb, _ = surface_samples(b, n_samples, seed)
    return point_chamfer(pa, pb, brute, squared)


def normal_consistency(a: TriMesh, b: TriMesh, n_samples: int = CD_SAMPLES, seed: int = 0,
                       brute: bool = False) -> float:
    """Symmetric mean absolute cosine between face normals of nearest samples."""
    pa, na = surface_samples(a, n_samples, seed)
    pb, nb = surface_samples(b, n_samples, seed)
    return point_normal_consistency(pa, na, pb, nb, brute)


def face_adjacency(mesh: TriMesh) -> np.ndarray:
    """Pairs of faces sharing an undirected edge, shape (P, 2)."""
    F = mesh.faces
    e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    e.sort(axis=1)
    owner = np.tile(np.arange(len(F)), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    pairs = []
    start = 0
    n = len(e)
    while start < n:
        stop = start + 1
        while stop < n and e[stop, 0] == e[start, 0] and e[stop, 1] == e[start, 1]:
            stop += 1
        grp = owner[start:stop]
        for i in range(len(grp)):
            for j in range(i + 1, len(grp)):
                pairs.append((grp[i], grp[j]))
        start = stop
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def enmf_faces(mesh: TriMesh, delta: float = 0.0) -> np.ndarray:
    """Faces whose normal has cosine below ``delta`` with some edge-adjacent face."""
    pairs = face_adjacency(mesh)
    n = mesh.face_normals
    flag = np.zeros(mesh.n_faces, dtype=bool)
    if len(pairs):
        bad = (n[pairs[:, 0]] * n[pairs[:, 1]]).sum(axis=1) < delta
        flag[pairs[bad, 0]] = True
        flag[pairs[bad, 1]] = True
    return flag


def enmf_ratio(mesh: TriMesh, delta: float = 0.0) -> float:
    if mesh.n_faces == 0:
        return 0.0
    return float(enmf_faces(mesh, delta).mean())


def si_ratio(mesh: TriMesh, brute: bool = False) -> float:
    """Fraction of faces crossing a face they share no vertex with."""
    if mesh.n_faces == 0:
        raise EmptyMesh("empty mesh")
    return float(self_intersecting_faces(mesh, brute=brute).mean())


def p2p_error(pred_vertices, gt_vertices) -> float:
    """Mean Euclidean distance between index-aligned point sets."""
    a = np.asarray(pred_vertices, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(gt_vertices, dtype=np.float64).reshape(-1, 3)
    if len(a) != len(b):
        raise CountMismatch(f"{len(a)} predicted vs {len(b)} reference points")
    if len(a) == 0:
        return 0.0
    return float(np.linalg.norm(a - b, axis=1).mean())


@dataclass
class MetricsReport:
    cd: float
    nc: float
    enmf_ratio: float
    si_ratio: float
    p2p: float | None = None
    n_samples: int = CD_SAMPLES
    delta: float = 0.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table_row(self, name: str = "") -> str:
        p2p = "-" if self.p2p is None else f"{self.p2p:.4f}"
        return (f"{name:<12} {self.cd * 1e3:>10.4f} {self.nc:>8.4f} "
                f"{self.enmf_ratio * 1e5:>12.2f} {self.si_ratio:>8.4f} {p2p:>8}")


TABLE_HEADER = f"{'':<12} {'CD(x1e3)':>10} {'NC':>8} {'E-NMF(x1e5)':>12} {'SI':>8} {'P2P':>8}"


def format_table(reports: dict) -> str:
    """Aligned plain-text table of named reports (display scaling only)."""
    return "\n".join([TABLE_HEADER] + [r.table_row(k) for k, r in reports.items()])


def evaluate(pred: TriMesh, gt: TriMesh, n_samples: int = CD_SAMPLES, seed: int = 0,
             delta: float = 0.0, gt_vertices=None) -> MetricsReport:
    """Full report for a predicted mesh against a reference mesh."""
    p2p = None
    if gt_vertices is not None:
        p2p = p2p_error(pred.vertices, gt_vertices)
    return MetricsReport(chamfer(pred, gt, n_samples, seed), normal_consistency(pred, gt, n_samples, seed),
                         enmf_ratio(pred, delta), si_ratio(pred), p2p, n_samples, delta, seed)
