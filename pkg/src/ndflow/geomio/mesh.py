"""Indexed triangle meshes, OBJ/PLY I/O and normalization."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DegenerateExtent, EmptyMesh, IoError, ParseError

log = logging.getLogger(__name__)

AREA_EPS = 1e-12


@dataclass(eq=False)
class TriMesh:
    """Triangle mesh with ``vertices`` (V, 3) float64 and ``faces`` (F, 3) int64."""

    vertices: np.ndarray
    faces: np.ndarray
    dropped_faces: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        if "face_normals" not in self._cache:
            n = self.face_cross()
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            self._cache["face_normals"] = n / np.where(norm > 0, norm, 1.0)
        return self._cache["face_normals"]

    def edge_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (E, 2) and how many faces use each."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def boundary_edges(self) -> np.ndarray:
        uniq, counts = self.edge_counts()
        return uniq[counts == 1]

    def is_watertight(self) -> bool:
        """Every undirected edge shared by exactly two faces."""
        if self.n_faces == 0:
            return False
        _, counts = self.edge_counts()
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        uniq, _ = self.edge_counts()
        used = np.unique(self.faces).size
        return int(used - len(uniq) + self.n_faces)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), self.dropped_faces)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()


def clean_faces(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop faces with repeated indices or area below ``AREA_EPS``."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return faces, 0
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    keep = distinct & (area > AREA_EPS)
    return faces[keep], int(np.count_nonzero(~keep))


def make_mesh(vertices, faces) -> TriMesh:
    """Build a validated mesh, dropping degenerate faces."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise ParseError(f"face index out of range for {len(vertices)} vertices")
    faces, dropped = clean_faces(vertices, faces)
    if len(faces) == 0:
        raise EmptyMesh("mesh has no faces after cleanup")
    if dropped:
        log.info("dropped %d degenerate faces", dropped)
    return TriMesh(vertices, faces, dropped)


# ---------------------------------------------------------------- readers

def _obj_index(tok: str, n_vertices: int) -> int:
    idx = int(tok.split("/")[0])
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    return idx


def _read_obj(text: str) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs three coordinates")
            elif parts[0] == "f":
                idx = [_obj_index(tok, len(verts)) for tok in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least three vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    return make_mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                     np.array(faces, dtype=np.int64).reshape(-1, 3))


def _read_ply(text: str) -> TriMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply magic")
    n_vert = n_face = None
    vert_props: list[str] = []
    current = None
    body = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ParseError("only ascii PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if body is None or n_vert is None or n_face is None:
        raise ParseError("incomplete PLY header")
    try:
        xyz = [vert_props.index(c) for c in "xyz"]
    except ValueError:
        raise ParseError("PLY vertex lacks x/y/z") from None
    rows = [ln for ln in lines[body:] if ln.strip()]
    if len(rows) < n_vert + n_face:
        raise ParseError("PLY body shorter than declared")
    try:
        verts = np.array([[float(ln.split()[k]) for k in xyz] for ln in rows[:n_vert]], dtype=np.float64)
        faces = []
        for ln in rows[n_vert:n_vert + n_face]:
            vals = [int(x) for x in ln.split()]
            cnt, idx = vals[0], vals[1:]
            if cnt != len(idx) or cnt < 3:
                raise ValueError("bad face record")
            for k in range(1, cnt - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return make_mesh(verts.reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriMesh:
    """Read an OBJ or ascii PLY file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(str(exc)) from None
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _read_obj(text)
    if suffix == ".ply":
        return _read_ply(text)
    raise ParseError(f"unsupported mesh format {suffix!r}")


def save_obj(mesh: TriMesh, path) -> None:
    lines = ["v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def save_ply(mesh: TriMesh, path) -> None:
    head = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
            "property double x", "property double y", "property double z",
            f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    lines = head + ["%.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def save_mesh(mesh: TriMesh, path) -> None:
    if Path(path).suffix.lower() == ".ply":
        save_ply(mesh, path)
    else:
        save_obj(mesh, path)


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class Similarity:
    """Uniform scale plus translation, ``x -> scale * x + translation``."""

    scale: float
    translation: np.ndarray

    def apply(self, x):
        return self.scale * np.asarray(x, dtype=np.float64) + self.translation

    def inverse(self) -> "Similarity":
        return Similarity(1.0 / self.scale, -self.translation / self.scale)


def normalize_mesh(mesh: TriMesh, radius: float = 0.9) -> tuple[TriMesh, Similarity]:
    """Center the bounding box at the origin and scale the farthest vertex to ``radius``."""
    if mesh.n_vertices == 0:
        raise EmptyMesh("cannot normalize an empty mesh")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    if not np.linalg.norm(hi - lo) > 0:
        raise DegenerateExtent("bounding box has zero diagonal")
    center = 0.5 * (lo + hi)
    far = np.linalg.norm(mesh.vertices - center, axis=1).max()
    scale = radius / far
    tf = Similarity(float(scale), -scale * center)
    out = TriMesh((mesh.vertices - center) * scale, mesh.faces.copy(), mesh.dropped_faces)
    return out, tf
