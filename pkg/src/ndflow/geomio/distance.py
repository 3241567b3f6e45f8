"""Point-to-mesh signed distance and triangle-triangle intersection.

Nearest-triangle queries run through an axis-aligned bounding volume
hierarchy; the brute-force scans share the per-triangle arithmetic so both
paths return identical numbers.  Signs come from angle-weighted
pseudonormals at the closest feature (face, edge or vertex).
"""
from __future__ import annotations

import numpy as np
from numba import njit

from ..errors import NotWatertight
from .mesh import TriMesh

# closest-feature codes returned by _closest_on_triangle
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_AC, EDGE_BC = range(7)

LEAF_SIZE = 4
PRUNE_SLACK = 1.0 + 1e-9


@njit(cache=True)
def _closest_on_triangle(p, a, b, c, out):
    """Closest point of triangle abc to p (Ericson's region walk).

    Writes the point into ``out`` and returns the feature code.
    """
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        out[0], out[1], out[2] = a[0], a[1], a[2]
        return 1
    bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        out[0], out[1], out[2] = b[0], b[1], b[2]
        return 2
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        out[0], out[1], out[2] = a[0] + v * ab0, a[1] + v * ab1, a[2] + v * ab2
        return 4
    cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        out[0], out[1], out[2] = c[0], c[1], c[2]
        return 3
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        out[0], out[1], out[2] = a[0] + w * ac0, a[1] + w * ac1, a[2] + w * ac2
        return 5
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = b[0] + w * (c[0] - b[0])
        out[1] = b[1] + w * (c[1] - b[1])
        out[2] = b[2] + w * (c[2] - b[2])
        return 6
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    out[0] = a[0] + ab0 * v + ac0 * w
    out[1] = a[1] + ab1 * v + ac1 * w
    out[2] = a[2] + ab2 * v + ac2 * w
    return 0


@njit(cache=True)
def _build_bvh(bmin, bmax, leaf_size):
    n = bmin.shape[0]
    cent = 0.5 * (bmin + bmax)
    order = np.arange(n)
    cap = 2 * n + 1
    node_min = np.empty((cap, 3))
    node_max = np.empty((cap, 3))
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    stack = np.empty((cap, 3), dtype=np.int64)
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node, s, e = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for k in range(s, e):
            t = order[k]
            for d in range(3):
                lo[d] = min(lo[d], bmin[t, d])
                hi[d] = max(hi[d], bmax[t, d])
                clo[d] = min(clo[d], cent[t, d])
                chi[d] = max(chi[d], cent[t, d])
        node_min[node] = lo
        node_max[node] = hi
        start[node] = s
        count[node] = e - s
        if e - s <= leaf_size:
            continue
        axis = np.argmax(chi - clo)
        seg = order[s:e].copy()
        idx = np.argsort(cent[seg, axis], kind="mergesort")
        order[s:e] = seg[idx]
        mid = (s + e) // 2
        l, r = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l, r
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = l, s, mid
        sp += 1
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = r, mid, e
        sp += 1
    return (node_min[:n_nodes].copy(), node_max[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), start[:n_nodes].copy(), count[:n_nodes].copy(), order)


@njit(cache=True)
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for d in range(3):
        if p[d] < lo[d]:
            t = lo[d] - p[d]
            d2 += t * t
        elif p[d] > hi[d]:
            t = p[d] - hi[d]
            d2 += t * t
    return d2


@njit(cache=True)
def _tri_dist2(p, V, F, t, q):
    reg = _closest_on_triangle(p, V[F[t, 0]], V[F[t, 1]], V[F[t, 2]], q)
    dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
    return dx * dx + dy * dy + dz * dz, reg


@njit(cache=True)
def _nearest_bvh(points, V, F, node_min, node_max, left, right, start, count, order):
    n = points.shape[0]
    best_d2 = np.empty(n)
    best_t = np.empty(n, dtype=np.int64)
    best_r = np.empty(n, dtype=np.int64)
    best_q = np.empty((n, 3))
    q = np.empty(3)
    stack = np.empty(128, dtype=np.int64)
    for i in range(n):
        p = points[i]
        bd, bt, br = np.inf, -1, -1
        bq0, bq1, bq2 = 0.0, 0.0, 0.0
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(p, node_min[node], node_max[node]) > bd * PRUNE_SLACK:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    t = order[k]
                    d2, reg = _tri_dist2(p, V, F, t, q)
                    if d2 < bd or (d2 == bd and t < bt):
                        bd, bt, br = d2, t, reg
                        bq0, bq1, bq2 = q[0], q[1], q[2]
            else:
                l, r = left[node], right[node]
                dl = _box_dist2(p, node_min[l], node_max[l])
                dr = _box_dist2(p, node_min[r], node_max[r])
                if dl <= dr:
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        best_d2[i], best_t[i], best_r[i] = bd, bt, br
        best_q[i, 0], best_q[i, 1], best_q[i, 2] = bq0, bq1, bq2
    return best_d2, best_t, best_r, best_q


@njit(cache=True)
def _nearest_brute(points, V, F):
    n = points.shape[0]
    best_d2 = np.empty(n)
    best_t = np.empty(n, dtype=np.int64)
    best_r = np.empty(n, dtype=np.int64)
    best_q = np.empty((n, 3))
    q = np.empty(3)
    for i in range(n):
        p = points[i]
        bd, bt, br = np.inf, -1, -1
        bq0, bq1, bq2 = 0.0, 0.0, 0.0
        for t in range(F.shape[0]):
            d2, reg = _tri_dist2(p, V, F, t, q)
            if d2 < bd or (d2 == bd and t < bt):
                bd, bt, br = d2, t, reg
                bq0, bq1, bq2 = q[0], q[1], q[2]
        best_d2[i], best_t[i], best_r[i] = bd, bt, br
        best_q[i, 0], best_q[i, 1], best_q[i, 2] = bq0, bq1, bq2
    return best_d2, best_t, best_r, best_q


@njit(cache=True)
def _apply_sign(points, d2, tri, reg, q, F, face_n, edge_n, vert_n):
    n = points.shape[0]
    out = np.empty(n)
    for i in range(n):
        t, r = tri[i], reg[i]
        if r == 0:
            nrm = face_n[t]
        elif r == 1:
            nrm = vert_n[F[t, 0]]
        elif r == 2:
            nrm = vert_n[F[t, 1]]
        elif r == 3:
            nrm = vert_n[F[t, 2]]
        else:
            nrm = edge_n[t, r - 4]
        s = 0.0
        for d in range(3):
            s += (points[i, d] - q[i, d]) * nrm[d]
        dist = np.sqrt(d2[i])
        out[i] = -dist if s < 0.0 else dist
    return out


def _pseudonormals(mesh: TriMesh):
    V, F = mesh.vertices, mesh.faces
    fn = mesh.face_normals
    # edge slots follow the feature codes: ab, ac, bc
    pairs = np.stack([F[:, [0, 1]], F[:, [0, 2]], F[:, [1, 2]]], axis=1)
    keys = np.sort(pairs, axis=2).reshape(-1, 2)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    acc = np.zeros((len(uniq), 3))
    np.add.at(acc, inv, np.repeat(fn, 3, axis=0))
    edge_n = acc[inv].reshape(-1, 3, 3)
    tri = V[F]
    vert_n = np.zeros_like(V)
    for k in range(3):
        u = tri[:, (k + 1) % 3] - tri[:, k]
        w = tri[:, (k + 2) % 3] - tri[:, k]
        cosang = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vert_n, F[:, k], ang[:, None] * fn)
    return fn, edge_n, vert_n


class MeshQuery:
    """Reusable acceleration structure for distance queries against one mesh."""

    def __init__(self, mesh: TriMesh, leaf_size: int = LEAF_SIZE):
        self.mesh = mesh
        tri = mesh.triangles()
        self.bvh = _build_bvh(tri.min(axis=1), tri.max(axis=1), leaf_size)
        self._normals = None

    def nearest(self, points, brute: bool = False):
        """Squared distance, triangle index, feature code and closest point per query."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        V, F = self.mesh.vertices, self.mesh.faces
        if brute:
            return _nearest_brute(pts, V, F)
        return _nearest_bvh(pts, V, F, *self.bvh)

    def unsigned(self, points, brute: bool = False) -> np.ndarray:
        return np.sqrt(self.nearest(points, brute)[0])

    def signed(self, points, brute: bool = False) -> np.ndarray:
        if self._normals is None:
            if not self.mesh.is_watertight():
                raise NotWatertight(f"{len(self.mesh.boundary_edges())} boundary edges; sign undefined")
            self._normals = _pseudonormals(self.mesh)
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        d2, tri, reg, q = self.nearest(pts, brute)
        return _apply_sign(pts, d2, tri, reg, q, self.mesh.faces, *self._normals)


def mesh_query(mesh: TriMesh) -> MeshQuery:
    q = mesh._cache.get("query")
    if q is None:
        q = mesh._cache["query"] = MeshQuery(mesh)
    return q


def signed_distance(mesh: TriMesh, p):
    """Signed distance from ``p`` (one point or (N, 3)) to a watertight mesh; negative inside."""
    p = np.asarray(p, dtype=np.float64)
    out = mesh_query(mesh).signed(p)
    return float(out[0]) if p.ndim == 1 else out


# ---------------------------------------------------------------- triangle-triangle

@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def _unit(v):
    n = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if n == 0.0:
        return v
    return v / n


@njit(cache=True)
def _interval(vv0, vv1, vv2, d0, d1, d2):
    """Projection interval of a triangle on the planes' intersection line.

    Returns (lo, hi, coplanar_flag).
    """
    if d0 * d1 > 0.0:
        a = vv2 + (vv0 - vv2) * d2 / (d2 - d0)
        b = vv2 + (vv1 - vv2) * d2 / (d2 - d1)
    elif d0 * d2 > 0.0:
        a = vv1 + (vv0 - vv1) * d1 / (d1 - d0)
        b = vv1 + (vv2 - vv1) * d1 / (d1 - d2)
    elif d1 * d2 > 0.0 or d0 != 0.0:
        a = vv0 + (vv1 - vv0) * d0 / (d0 - d1)
        b = vv0 + (vv2 - vv0) * d0 / (d0 - d2)
    elif d1 != 0.0:
        a = vv1 + (vv0 - vv1) * d1 / (d1 - d0)
        b = vv1 + (vv2 - vv1) * d1 / (d1 - d2)
    elif d2 != 0.0:
        a = vv2 + (vv0 - vv2) * d2 / (d2 - d0)
        b = vv2 + (vv1 - vv2) * d2 / (d2 - d1)
    else:
        return 0.0, 0.0, True
    if a > b:
        a, b = b, a
    return a, b, False


@njit(cache=True)
def _orient2(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


@njit(cache=True)
def _seg_seg_2d(p, q, r, s, eps):
    o1 = _orient2(p[0], p[1], q[0], q[1], r[0], r[1])
    o2 = _orient2(p[0], p[1], q[0], q[1], s[0], s[1])
    o3 = _orient2(r[0], r[1], s[0], s[1], p[0], p[1])
    o4 = _orient2(r[0], r[1], s[0], s[1], q[0], q[1])
    if ((o1 > eps and o2 < -eps) or (o1 < -eps and o2 > eps)) and \
            ((o3 > eps and o4 < -eps) or (o3 < -eps and o4 > eps)):
        return True
    # collinear / touching configurations
    for o, a, b, c in ((o1, p, q, r), (o2, p, q, s), (o3, r, s, p), (o4, r, s, q)):
        if abs(o) <= eps:
            if min(a[0], b[0]) - eps <= c[0] <= max(a[0], b[0]) + eps and \
                    min(a[1], b[1]) - eps <= c[1] <= max(a[1], b[1]) + eps:
                return True
    return False


@njit(cache=True)
def _point_in_tri_2d(p, a, b, c, eps):
    o1 = _orient2(a[0], a[1], b[0], b[1], p[0], p[1])
    o2 = _orient2(b[0], b[1], c[0], c[1], p[0], p[1])
    o3 = _orient2(c[0], c[1], a[0], a[1], p[0], p[1])
    return (o1 >= -eps and o2 >= -eps and o3 >= -eps) or (o1 <= eps and o2 <= eps and o3 <= eps)


@njit(cache=True)
def _coplanar_tri_tri(n, V0, V1, V2, U0, U1, U2, eps):
    ax = np.abs(n)
    if ax[0] > ax[1]:
        if ax[0] > ax[2]:
            i0, i1 = 1, 2
        else:
            i0, i1 = 0, 1
    else:
        if ax[2] > ax[1]:
            i0, i1 = 0, 1
        else:
            i0, i1 = 0, 2
    v = np.empty((3, 2))
    u = np.empty((3, 2))
    for k, P in enumerate((V0, V1, V2)):
        v[k, 0], v[k, 1] = P[i0], P[i1]
    for k, P in enumerate((U0, U1, U2)):
        u[k, 0], u[k, 1] = P[i0], P[i1]
    for i in range(3):
        for j in range(3):
            if _seg_seg_2d(v[i], v[(i + 1) % 3], u[j], u[(j + 1) % 3], eps):
                return True
    if _point_in_tri_2d(v[0], u[0], u[1], u[2], eps):
        return True
    if _point_in_tri_2d(u[0], v[0], v[1], v[2], eps):
        return True
    return False


@njit(cache=True)
def tri_tri_intersect(V0, V1, V2, U0, U1, U2, eps=1e-12):
    """Interval-overlap triangle intersection test with coplanar handling."""
    n1 = _unit(_cross(V1 - V0, V2 - V0))
    d1 = -np.dot(n1, V0)
    du0, du1, du2 = np.dot(n1, U0) + d1, np.dot(n1, U1) + d1, np.dot(n1, U2) + d1
    if abs(du0) < eps:
        du0 = 0.0
    if abs(du1) < eps:
        du1 = 0.0
    if abs(du2) < eps:
        du2 = 0.0
    if du0 * du1 > 0.0 and du0 * du2 > 0.0:
        return False
    n2 = _unit(_cross(U1 - U0, U2 - U0))
    d2 = -np.dot(n2, U0)
    dv0, dv1, dv2 = np.dot(n2, V0) + d2, np.dot(n2, V1) + d2, np.dot(n2, V2) + d2
    if abs(dv0) < eps:
        dv0 = 0.0
    if abs(dv1) < eps:
        dv1 = 0.0
    if abs(dv2) < eps:
        dv2 = 0.0
    if dv0 * dv1 > 0.0 and dv0 * dv2 > 0.0:
        return False
    D = _cross(n1, n2)
    idx = np.argmax(np.abs(D))
    a0, a1, acop = _interval(V0[idx], V1[idx], V2[idx], dv0, dv1, dv2)
    if acop:
        return _coplanar_tri_tri(n1, V0, V1, V2, U0, U1, U2, eps)
    b0, b1, bcop = _interval(U0[idx], U1[idx], U2[idx], du0, du1, du2)
    if bcop:
        return _coplanar_tri_tri(n1, V0, V1, V2, U0, U1, U2, eps)
    return not (a1 < b0 or b1 < a0)


@njit(cache=True)
def _shares_vertex(F, i, j):
    for a in range(3):
        for b in range(3):
            if F[i, a] == F[j, b]:
                return True
    return False


@njit(cache=True)
def _self_intersections_brute(V, F, eps):
    n = F.shape[0]
    flag = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        for j in range(i + 1, n):
            if _shares_vertex(F, i, j):
                continue
            if tri_tri_intersect(V[F[i, 0]], V[F[i, 1]], V[F[i, 2]], V[F[j, 0]], V[F[j, 1]], V[F[j, 2]], eps):
                flag[i] = True
                flag[j] = True
    return flag


@njit(cache=True)
def _self_intersections_bvh(V, F, bmin, bmax, node_min, node_max, left, right, start, count, order, eps):
    n = F.shape[0]
    flag = np.zeros(n, dtype=np.bool_)
    stack = np.empty(128, dtype=np.int64)
    for i in range(n):
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            overlap = True
            for d in range(3):
                if node_min[node, d] > bmax[i, d] or node_max[node, d] < bmin[i, d]:
                    overlap = False
            if not overlap:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    j = order[k]
                    if j <= i:
                        continue
                    sep = False
                    for d in range(3):
                        if bmin[j, d] > bmax[i, d] or bmax[j, d] < bmin[i, d]:
                            sep = True
                    if sep or _shares_vertex(F, i, j):
                        continue
                    if tri_tri_intersect(V[F[i, 0]], V[F[i, 1]], V[F[i, 2]],
                                         V[F[j, 0]], V[F[j, 1]], V[F[j, 2]], eps):
                        flag[i] = True
                        flag[j] = True
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
    return flag


def self_intersecting_faces(mesh: TriMesh, eps: float = 1e-12, brute: bool = False) -> np.ndarray:
    """Boolean mask of faces crossing at least one face they share no vertex with."""
    V, F = mesh.vertices, mesh.faces
    if brute:
        return _self_intersections_brute(V, F, eps)
    tri = mesh.triangles()
    pad = 1e-9
    bmin, bmax = tri.min(axis=1) - pad, tri.max(axis=1) + pad
    bvh = _build_bvh(bmin, bmax, LEAF_SIZE)
    return _self_intersections_bvh(V, F, bmin, bmax, *bvh, eps)
