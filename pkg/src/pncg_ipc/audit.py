"""Discrete penetration audit of a surface configuration.

The minimum distance over all non-adjacent PT and EE surface pairs, with
edge/triangle crossings reported as distance 0.  A static distance check alone
cannot see a vertex that has tunnelled through a face, hence the crossing test.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .contact import HalfSpace, _comb_dist, _detect, _ee_c, _hash_build, _hash_query, _pt_c
from .mesh import TetMesh


@numba.njit(cache=True)
def _segment_hits_triangle(p, q, a, b, c):
    # Moller-Trumbore on the segment p -> q, closed on both ends
    d0, d1, d2 = q[0] - p[0], q[1] - p[1], q[2] - p[2]
    e10, e11, e12 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e20, e21, e22 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    h0 = d1 * e22 - d2 * e21
    h1 = d2 * e20 - d0 * e22
    h2 = d0 * e21 - d1 * e20
    det = e10 * h0 + e11 * h1 + e12 * h2
    scale = np.sqrt((e10 * e10 + e11 * e11 + e12 * e12) * (e20 * e20 + e21 * e21 + e22 * e22)
                    * (d0 * d0 + d1 * d1 + d2 * d2))
    if abs(det) <= 1e-14 * scale:
        return False
    inv = 1.0 / det
    s0, s1, s2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    u = inv * (s0 * h0 + s1 * h1 + s2 * h2)
    if u < 0.0 or u > 1.0:
        return False
    q0 = s1 * e12 - s2 * e11
    q1 = s2 * e10 - s0 * e12
    q2 = s0 * e11 - s1 * e10
    v = inv * (d0 * q0 + d1 * q1 + d2 * q2)
    if v < 0.0 or u + v > 1.0:
        return False
    t = inv * (e20 * q0 + e21 * q1 + e22 * q2)
    return 0.0 <= t <= 1.0


@numba.njit(cache=True)
def _pt_dist(x, v, a, b, c):
    c0, c1, c2, c3 = _pt_c(x[v], x[a], x[b], x[c])
    return _comb_dist(x, v, a, b, c, c0, c1, c2, c3)


@numba.njit(cache=True)
def _ee_dist(x, a, b, c, d):
    c0, c1, c2, c3 = _ee_c(x[a], x[b], x[c], x[d])
    return _comb_dist(x, a, b, c, d, c0, c1, c2, c3)


@numba.njit(cache=True)
def _prim_boxes(x, prims):
    lo = np.empty((prims.shape[0], 3))
    hi = np.empty((prims.shape[0], 3))
    for i in range(prims.shape[0]):
        for ax in range(3):
            lo[i, ax] = x[prims[i, 0], ax]
            hi[i, ax] = x[prims[i, 0], ax]
            for k in range(1, prims.shape[1]):
                lo[i, ax] = min(lo[i, ax], x[prims[i, k], ax])
                hi[i, ax] = max(hi[i, ax], x[prims[i, k], ax])
    return lo, hi


@numba.njit(cache=True)
def _box_gap2(lo, hi, i, lo2, hi2, j):
    acc = 0.0
    for ax in range(3):
        g = max(lo[i, ax] - hi2[j, ax], lo2[j, ax] - hi[i, ax])
        if g > 0.0:
            acc += g * g
    return acc


@numba.njit(cache=True)
def _brute(x, points, tris, edges):
    # every pair is visited; the box gap only skips pairs that cannot beat `best`
    best = np.inf
    arg = np.array([-1, -1, -1])  # kind (0 PT, 1 EE, 2 crossing), prim a, prim b
    plo, phi = _prim_boxes(x, points.reshape(-1, 1))
    tlo, thi = _prim_boxes(x, tris)
    elo, ehi = _prim_boxes(x, edges)
    for ip in range(points.shape[0]):
        v = points[ip]
        for f in range(tris.shape[0]):
            a, b, c = tris[f, 0], tris[f, 1], tris[f, 2]
            if v == a or v == b or v == c:
                continue
            if _box_gap2(plo, phi, ip, tlo, thi, f) >= best * best:
                continue
            d = _pt_dist(x, v, a, b, c)
            if d < best:
                best = d
                arg[0], arg[1], arg[2] = 0, v, f
    for e1 in range(edges.shape[0]):
        a, b = edges[e1, 0], edges[e1, 1]
        for e2 in range(e1 + 1, edges.shape[0]):
            c, d_ = edges[e2, 0], edges[e2, 1]
            if a == c or a == d_ or b == c or b == d_:
                continue
            if _box_gap2(elo, ehi, e1, elo, ehi, e2) >= best * best:
                continue
            d = _ee_dist(x, a, b, c, d_)
            if d < best:
                best = d
                arg[0], arg[1], arg[2] = 1, e1, e2
        for f in range(tris.shape[0]):
            p, q, r = tris[f, 0], tris[f, 1], tris[f, 2]
            if a == p or a == q or a == r or b == p or b == q or b == r:
                continue
            if _box_gap2(elo, ehi, e1, tlo, thi, f) > 0.0:
                continue
            if _segment_hits_triangle(x[a], x[b], x[p], x[q], x[r]):
                return 0.0, np.array([2, e1, f])
    return best, arg


@dataclass
class AuditResult:
    min_distance: float
    kind: str
    pair: tuple
    ground_distance: float = float("inf")

    @property
    def ok(self) -> bool:
        return self.min_distance > 0 and self.ground_distance > 0

    @property
    def overall(self) -> float:
        return min(self.min_distance, self.ground_distance)


_KINDS = {0: "pt", 1: "ee", 2: "crossing", -1: "none"}


def _surface(mesh: TetMesh):
    return (np.ascontiguousarray(mesh.surface_vertices, np.int64),
            np.ascontiguousarray(mesh.surface_faces, np.int64),
            np.ascontiguousarray(mesh.surface_edges, np.int64))


def surface_from_faces(faces):
    """(points, triangles, edges) of a triangle soup such as an OBJ frame."""
    tris = np.ascontiguousarray(faces, np.int64).reshape(-1, 3)
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return np.unique(tris), tris, np.ascontiguousarray(edges)


def min_surface_distance(mesh: TetMesh, x, method: str = "brute", radius: float | None = None):
    """(min distance, kind, pair) over all non-adjacent surface primitive pairs.

    method="hash" only measures pairs closer than `radius` (default: one average
    surface edge; the radius itself is returned as a lower bound when nothing is
    that close) but checks every edge/triangle crossing.
    """
    return min_distance(x, *_surface(mesh), method=method, radius=radius)


def min_distance(x, points, tris, edges, method: str = "brute", radius: float | None = None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if method == "brute":
        d, arg = _brute(x, points, tris, edges)
        return float(d), _KINDS[int(arg[0])], (int(arg[1]), int(arg[2]))
    if method != "hash":
        raise ValueError(f"unknown audit method {method!r}")
    if radius is None:
        radius = float(np.mean(np.linalg.norm(x[edges[:, 0]] - x[edges[:, 1]], axis=1)))
    return _hash_min(x, points, tris, edges, radius)


@numba.njit(cache=True)
def _hashed_crossing(x, tris, edges, inv_h):
    """First (edge, face) pair whose segment crosses the triangle, or (-1, -1)."""
    n_tris = tris.shape[0]
    tlo = np.empty((n_tris, 3))
    thi = np.empty((n_tris, 3))
    for f in range(n_tris):
        for ax in range(3):
            a = x[tris[f, 0], ax]
            b = x[tris[f, 1], ax]
            c = x[tris[f, 2], ax]
            tlo[f, ax] = min(a, min(b, c))
            thi[f, ax] = max(a, max(b, c))
    start, ids = _hash_build(tlo, thi, inv_h)
    seen = np.full(n_tris, -1, np.int64)
    buf = np.empty(n_tris, np.int64)
    qlo = np.empty(3)
    qhi = np.empty(3)
    for e in range(edges.shape[0]):
        a, b = edges[e, 0], edges[e, 1]
        for ax in range(3):
            qlo[ax] = min(x[a, ax], x[b, ax])
            qhi[ax] = max(x[a, ax], x[b, ax])
        m = _hash_query(start, ids, tlo, thi, qlo, qhi, inv_h, seen, e, buf)
        for jj in range(m):
            f = buf[jj]
            p, q, r = tris[f, 0], tris[f, 1], tris[f, 2]
            if a == p or a == q or a == r or b == p or b == q or b == r:
                continue
            if _segment_hits_triangle(x[a], x[b], x[p], x[q], x[r]):
                return e, f
    return -1, -1


def _hash_min(x, points, tris, edges, radius):
    cell = max(radius, float(np.mean(np.linalg.norm(x[edges[:, 0]] - x[edges[:, 1]], axis=1))))
    inv_h = 1.0 / cell
    e, f = _hashed_crossing(x, tris, edges, inv_h)
    if e >= 0:
        return 0.0, "crossing", (int(e), int(f))
    z = np.zeros(0, np.int64)
    obj = np.zeros(max(len(points), len(tris), len(edges)), np.int64)
    kind, pa, pb, _, _, dist, _ = _detect(x, points, tris, edges, radius, 0.5 * radius, inv_h,
                                          z, z, False, obj, obj, obj, False)
    if len(dist) == 0:
        return float(radius), "none", (-1, -1)
    i = int(np.argmin(dist))
    return float(dist[i]), _KINDS[int(kind[i])], (int(pa[i]), int(pb[i]))


def audit_configuration(mesh: TetMesh, x, half_spaces=(), method: str = "brute") -> AuditResult:
    d, kind, pair = min_surface_distance(mesh, x, method)
    g = float("inf")
    for hs in half_spaces:
        hs = hs if isinstance(hs, HalfSpace) else HalfSpace(*hs)
        g = min(g, float(np.min(hs.signed_distance(np.asarray(x)[mesh.surface_vertices]))))
    return AuditResult(d, kind, pair, g)


__all__ = ["AuditResult", "audit_configuration", "min_distance", "min_surface_distance",
           "surface_from_faces"]
