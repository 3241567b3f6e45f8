"""Vectorized marching cubes over a regular grid spanning [-1, 1]^3."""
from __future__ import annotations

import numpy as np

from ..errors import BadParams, EmptySurface
from ._mc_table import TRI_TABLE
from .mesh import TriMesh, clean_faces

# corner offsets (i, j, k) of the standard cube numbering
CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64)
EDGES = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4],
                  [0, 4], [1, 5], [2, 6], [3, 7]], dtype=np.int64)

_TRI = np.full((256, 16), -1, dtype=np.int64)
for _case, _row in enumerate(TRI_TABLE):
    _TRI[_case, :len(_row)] = _row
_NTRI = np.array([len(r) // 3 for r in TRI_TABLE], dtype=np.int64)


def grid_coords(resolution: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, resolution)


def grid_points(resolution: int) -> np.ndarray:
    """All grid points, ``[i, j, k] -> (x_i, y_j, z_k)``, flattened with k fastest."""
    c = grid_coords(resolution)
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def grid_to_mesh(grid: np.ndarray, iso: float = 0.0) -> TriMesh:
    """Extract the ``iso`` level set of a cubic grid sampled on [-1, 1]^3.

    Corners with value below ``iso`` count as inside; triangles are wound so
    normals point toward increasing field values.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise BadParams(f"grid must be cubic, got shape {grid.shape}")
    R = grid.shape[0]
    if R < 8:
        raise BadParams(f"grid resolution {R} below 8")
    if not np.all(np.isfinite(grid)):
        raise BadParams("grid contains non-finite values")
    inside = grid < iso
    if inside.all() or not inside.any():
        raise EmptySurface("field does not cross the iso level")

    n = R - 1
    case = np.zeros((n, n, n), dtype=np.int64)
    for bit, (di, dj, dk) in enumerate(CORNERS):
        case |= inside[di:di + n, dj:dj + n, dk:dk + n].astype(np.int64) << bit
    cells = np.nonzero((case > 0) & (case < 255))
    cell_case = case[cells]
    cell_ijk = np.stack(cells, axis=1)
    ntri = _NTRI[cell_case]
    if ntri.sum() == 0:
        raise EmptySurface("no triangles generated")

    # one row per emitted triangle: owning cell and its three cube-edge ids
    owner = np.repeat(np.arange(len(cell_case)), ntri)
    slot = np.arange(len(owner)) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    tri_edges = np.stack([_TRI[cell_case[owner], 3 * slot + m] for m in range(3)], axis=1)

    # global id of a cube edge = (axis, base grid point)
    a = CORNERS[EDGES[:, 0]]
    b = CORNERS[EDGES[:, 1]]
    base = np.minimum(a, b)
    axis = np.argmax(np.abs(b - a), axis=1)
    ijk = cell_ijk[owner][:, None, :] + base[tri_edges]
    gid = ((axis[tri_edges] * R + ijk[..., 0]) * R + ijk[..., 1]) * R + ijk[..., 2]
    uniq, inv = np.unique(gid.ravel(), return_inverse=True)

    ax = uniq // (R ** 3)
    rest = uniq % (R ** 3)
    i0, j0, k0 = rest // (R * R), (rest // R) % R, rest % R
    step = np.eye(3, dtype=np.int64)[ax]
    i1, j1, k1 = i0 + step[:, 0], j0 + step[:, 1], k0 + step[:, 2]
    v0, v1 = grid[i0, j0, k0], grid[i1, j1, k1]
    t = (iso - v0) / (v1 - v0)
    coords = grid_coords(R)
    p0 = np.stack([coords[i0], coords[j0], coords[k0]], axis=1)
    p1 = np.stack([coords[i1], coords[j1], coords[k1]], axis=1)
    verts = p0 + t[:, None] * (p1 - p0)

    # the table winds triangles with normals facing the inside corners
    faces = inv.reshape(-1, 3)[:, ::-1]
    faces, _ = clean_faces(verts, faces)
    if len(faces) == 0:
        raise EmptySurface("all triangles degenerate")
    return TriMesh(verts, np.ascontiguousarray(faces))
