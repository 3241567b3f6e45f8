"""Correspondence through template space, mesh registration, remeshing and label transfer."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ClusterCollapse, IoError, NoLabels, ParseError, ShapeMismatch
from .flow import RKF45, SolverConfig, batched, deform, deform_inverse
from .geomio.distance import mesh_query, self_intersecting_faces
from .geomio.mesh import TriMesh, clean_faces
from .metrics import enmf_faces
from .model import NdfModel

# geometry operations integrate the continuous flow accurately
GEOMETRY_SOLVER = SolverConfig(RKF45, tolerance=1e-5)


def _solver(solver):
    return GEOMETRY_SOLVER if solver is None else solver


def to_template(model: NdfModel, points, c, solver: SolverConfig | None = None) -> np.ndarray:
    single = np.ndim(points) == 1
    out = batched(lambda p: deform(model.velocity, np.asarray(c, float), p, _solver(solver)),
                  np.atleast_2d(points))
    return out[0] if single else out


def from_template(model: NdfModel, points, c, solver: SolverConfig | None = None) -> np.ndarray:
    single = np.ndim(points) == 1
    out = batched(lambda p: deform_inverse(model.velocity, np.asarray(c, float), p, _solver(solver)),
                  np.atleast_2d(points))
    return out[0] if single else out


def correspond(model: NdfModel, p, c_i, c_j, solver: SolverConfig | None = None) -> np.ndarray:
    """Map points of shape ``i`` to shape ``j``: ``D^-1(D(p, c_i), c_j)``."""
    return from_template(model, to_template(model, p, c_i, solver), c_j, solver)


@dataclass
class RegistrationResult:
    mesh: TriMesh
    source_id: str
    target_id: str
    displacement: np.ndarray

    def report(self) -> dict:
        d = self.displacement
        return {"source_id": self.source_id, "target_id": self.target_id,
                "n_vertices": int(self.mesh.n_vertices), "n_faces": int(self.mesh.n_faces),
                "displacement_mean": float(d.mean()) if d.size else 0.0,
                "displacement_max": float(d.max()) if d.size else 0.0,
                "displacement_min": float(d.min()) if d.size else 0.0}

    def save(self, obj_path, report_path=None) -> None:
        from .geomio.mesh import save_obj
        save_obj(self.mesh, obj_path)
        if report_path is not None:
            try:
                Path(report_path).write_text(json.dumps(self.report(), indent=1, sort_keys=True) + "\n")
            except OSError as exc:
                raise IoError(str(exc)) from None


def register_mesh(model: NdfModel, source: TriMesh, c_target, source_id: str = "template",
                  target_id: str = "target", solver: SolverConfig | None = None) -> RegistrationResult:
    """Carry a template-space mesh to the target shape, keeping its connectivity."""
    V = from_template(model, source.vertices, c_target, solver)
    mesh = TriMesh(V, source.faces.copy())
    return RegistrationResult(mesh, source_id, target_id, np.linalg.norm(V - source.vertices, axis=1))


# ---------------------------------------------------------------- remeshing

def _cluster(mesh: TriMesh, cell: float, offset: np.ndarray) -> TriMesh:
    V = mesh.vertices
    keys = np.floor((V - V.min(axis=0) + offset) / cell).astype(np.int64)
    _, label, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    label = label.reshape(-1)
    n = len(counts)
    newV = np.zeros((n, 3))
    np.add.at(newV, label, V)
    newV /= counts[:, None]
    F = label[mesh.faces]
    keep = (F[:, 0] != F[:, 1]) & (F[:, 1] != F[:, 2]) & (F[:, 0] != F[:, 2])
    F = F[keep]
    # merged clusters can produce the same triangle twice (with either winding)
    srt = np.sort(F, axis=1)
    _, first, cnt = np.unique(srt, axis=0, return_index=True, return_counts=True)
    F = F[np.sort(first[cnt == 1])]
    F, _ = clean_faces(newV, F)
    used = np.unique(F)
    remap = -np.ones(n, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(newV[used], remap[F])


def _relax(out: TriMesh, source: TriMesh, iters: int) -> TriMesh:
    """Umbrella smoothing with each step projected back onto ``source``.

    Cluster averaging can leave folded slivers; a few relaxed steps unfold
    them while the projection keeps the vertices on the input surface.
    """
    if iters <= 0:
        return out
    V, F = out.vertices.copy(), out.faces
    E = np.unique(np.sort(np.vstack([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1), axis=0)
    deg = np.bincount(E.ravel(), minlength=len(V)).astype(np.float64)[:, None]
    query = mesh_query(source)
    for _ in range(iters):
        acc = np.zeros_like(V)
        np.add.at(acc, E[:, 0], V[E[:, 1]])
        np.add.at(acc, E[:, 1], V[E[:, 0]])
        V = query.nearest(0.5 * V + 0.5 * acc / deg)[3]
    return TriMesh(V, F)


def _valid(out: TriMesh, chi: int, folds_allowed: bool) -> bool:
    return (out.n_faces > 0 and out.is_watertight() and out.euler_characteristic() == chi
            and not self_intersecting_faces(out).any() and (folds_allowed or not enmf_faces(out).any()))


def remesh_cluster(mesh: TriMesh, n_vertices: int, tolerance: float = 0.1, max_tries: int = 8,
                   seed: int = 0, relax_iters: int = 3) -> TriMesh:
    """Uniform-grid vertex clustering to about ``n_vertices`` vertices.

    The cell size is found by bisection, then ``relax_iters`` projected
    smoothing steps even out the clustered vertices.  A result is accepted
    only if it is watertight, keeps the Euler characteristic, has no
    self-intersections and (when the input has none) no folded edges;
    otherwise the grid is shifted and the search repeated.
    """
    if n_vertices >= mesh.n_vertices:
        return mesh.copy()
    chi = mesh.euler_characteristic()
    folds_allowed = bool(enmf_faces(mesh).any())
    extent = float(np.max(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)))
    rng = np.random.default_rng(seed)
    lo_target, hi_target = n_vertices * (1 - tolerance), n_vertices * (1 + tolerance)
    for attempt in range(max_tries):
        offset = np.zeros(3) if attempt == 0 else rng.uniform(0.0, 1.0, 3)
        lo, hi = extent / 2000.0, extent
        best = None
        for _ in range(60):
            cell = np.sqrt(lo * hi)
            out = _cluster(mesh, cell, offset * cell)
            nv = out.n_vertices
            if lo_target <= nv <= hi_target:
                best = out
                break
            if nv > n_vertices:
                lo = cell
            else:
                hi = cell
        if best is not None:
            best = _relax(best, mesh, relax_iters)
            if _valid(best, chi, folds_allowed):
                return best
    raise ClusterCollapse(f"no valid clustering near {n_vertices} vertices after {max_tries} tries")


# ---------------------------------------------------------------- labels

def transfer_labels(model: NdfModel, sources: Sequence[tuple[TriMesh, np.ndarray, np.ndarray]],
                    target_mesh: TriMesh, c_target, solver: SolverConfig | None = None) -> np.ndarray:
    """Majority vote of labels carried from each source onto the target vertices.

    ``sources`` holds ``(mesh, vertex_labels, code)``; vertices labelled
    negative are treated as unlabelled.  For each source, labelled vertices
    are mapped into the target shape and every target vertex takes the label
    of the nearest mapped point.  Ties go to the smallest label proposed by
    the lowest-index source among the tied labels.
    """
    if not sources:
        raise NoLabels("no labelled sources")
    votes = []
    for mesh, labels, c in sources:
        labels = np.asarray(labels)
        if labels.shape[0] != mesh.n_vertices:
            raise ShapeMismatch("one label per source vertex required")
        mask = labels >= 0
        if not mask.any():
            raise NoLabels("source has no labelled vertices")
        mapped = correspond(model, mesh.vertices[mask], c, c_target, solver)
        _, idx = cKDTree(mapped).query(target_mesh.vertices)
        votes.append(labels[mask][idx])
    votes = np.stack(votes)  # (n_sources, n_target)
    return majority_vote(votes)


def majority_vote(votes: np.ndarray) -> np.ndarray:
    """Column-wise mode; ties resolved in favour of the earliest source's label."""
    votes = np.asarray(votes)
    out = np.empty(votes.shape[1], dtype=votes.dtype)
    for k in range(votes.shape[1]):
        col = votes[:, k]
        vals, counts = np.unique(col, return_counts=True)
        top = vals[counts == counts.max()]
        if len(top) == 1:
            out[k] = top[0]
        else:
            out[k] = next(v for v in col if v in top)
    return out


def face_labels(faces: np.ndarray, vertex_labels: np.ndarray) -> np.ndarray:
    """Mode of the three vertex labels (first vertex wins a three-way tie)."""
    L = np.asarray(vertex_labels)[faces]
    out = L[:, 0].copy()
    out[L[:, 1] == L[:, 2]] = L[L[:, 1] == L[:, 2], 1]
    return out


def label_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean intersection-over-union across the labels present in ``truth``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    ious = []
    for lab in np.unique(truth):
        inter = np.sum((pred == lab) & (truth == lab))
        union = np.sum((pred == lab) | (truth == lab))
        ious.append(inter / union)
    return float(np.mean(ious))


def save_labels(labels: np.ndarray, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex_index", "label_id"])
            for i, lab in enumerate(labels):
                w.writerow([i, int(lab)])
    except OSError as exc:
        raise IoError(str(exc)) from None


def load_labels(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(str(exc)) from None
    if not rows or rows[0] != ["vertex_index", "label_id"]:
        raise ParseError("label file needs a vertex_index,label_id header")
    body = rows[1:]
    labels = np.full(len(body), -1, dtype=np.int64)
    for r in body:
        i, lab = int(r[0]), int(r[1])
        if not 0 <= i < len(body):
            raise ParseError(f"vertex index {i} out of range")
        labels[i] = lab
    return labels


# ---------------------------------------------------------------- codes

def interpolate_codes(c_a, c_b, alpha: float) -> np.ndarray:
    a = np.asarray(c_a, dtype=np.float64)
    b = np.asarray(c_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"code shapes {a.shape} and {b.shape} differ")
    return (1.0 - alpha) * a + alpha * b
