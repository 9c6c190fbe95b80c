"""Log-barrier contact between surface primitives.

Point-triangle (PT) and edge-edge (EE) distances share one representation:
``t = c0 x0 + c1 x1 + c2 x2 + c3 x3`` and ``d = |t|``.  With the weights c
held fixed, dt/dx = [c_i I3] and d2t/dx2 = 0, which turns the barrier
Hessian diagonal and its quadratic form into a handful of dot products.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numba
import numpy as np

from .mesh import TetMesh


class PenetrationError(RuntimeError):
    """A primitive pair (or a vertex and a half-space) reached distance <= 0."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class Kind(enum.IntEnum):
    PT = 0
    EE = 1


# ---------------------------------------------------------------------------
# barrier


def barrier(d, d_hat):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise PenetrationError("barrier evaluated at non-positive distance")
    out = np.where(d < d_hat, -((d - d_hat) ** 2) * np.log(np.minimum(d, d_hat) / d_hat), 0.0)
    return out if out.ndim else float(out)


def barrier_derivatives(d, d_hat):
    """(b'(d), b''(d)); both vanish for d >= d_hat."""
    d = np.asarray(d, dtype=np.float64)
    inside = d < d_hat
    dc = np.where(inside, d, d_hat)
    r = dc - d_hat
    lg = np.log(dc / d_hat)
    db = -2.0 * r * lg - r * r / dc
    ddb = -2.0 * lg - 4.0 * r / dc + (r / dc) ** 2
    db = np.where(inside, db, 0.0)
    ddb = np.where(inside, ddb, 0.0)
    if db.ndim == 0:
        return float(db), float(ddb)
    return db, ddb


# ---------------------------------------------------------------------------
# closest points (numba, scalar)


@numba.njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@numba.njit(cache=True)
def _seg_param(p, a, b):
    """Clamped parameter s and squared distance from p to a + s (b - a)."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    den = ab0 * ab0 + ab1 * ab1 + ab2 * ab2
    s = 0.0
    if den > 0.0:
        s = (ap0 * ab0 + ap1 * ab1 + ap2 * ab2) / den
        s = min(max(s, 0.0), 1.0)
    r0, r1, r2 = ap0 - s * ab0, ap1 - s * ab1, ap2 - s * ab2
    return s, r0 * r0 + r1 * r1 + r2 * r2


@numba.njit(cache=True)
def pt_weights(p, a, b, c):
    """Barycentric weights (u, v, w) of the triangle point closest to p."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    den = va + vb + vc
    if vc > 0.0 and vb > 0.0 and va > 0.0 and den > 0.0:
        v = vb / den
        w = vc / den
        u = 1.0 - v - w
        if u >= 0.0:
            return u, v, w
    # on the boundary (or rounding put us there): best of the three edges
    s0, q0 = _seg_param(p, a, b)
    s1, q1 = _seg_param(p, b, c)
    s2, q2 = _seg_param(p, c, a)
    if q0 <= q1 and q0 <= q2:
        return 1.0 - s0, s0, 0.0
    if q1 <= q2:
        return 0.0, 1.0 - s1, s1
    return s2, 0.0, 1.0 - s2


PARALLEL_TOL = 1e-12
NEAR_PARALLEL = 1e-6


@numba.njit(cache=True)
def _ee_clamp(s, a, b, c, e, f):
    """Best t for s, then s re-clamped if t hit an end."""
    t = (b * s + f) / e
    if t < 0.0:
        return min(max(-c / a, 0.0), 1.0), 0.0
    if t > 1.0:
        return min(max((b - c) / a, 0.0), 1.0), 1.0
    return s, t


@numba.njit(cache=True)
def _ee_dist2(p1, q1, p2, q2, s, t):
    acc = 0.0
    for ax in range(3):
        w = p1[ax] + s * (q1[ax] - p1[ax]) - p2[ax] - t * (q2[ax] - p2[ax])
        acc += w * w
    return acc


@numba.njit(cache=True)
def ee_params(p1, q1, p2, q2):
    """Segment parameters (s, t) of the closest points p1 + s d1 and p2 + t d2."""
    d10, d11, d12 = q1[0] - p1[0], q1[1] - p1[1], q1[2] - p1[2]
    d20, d21, d22 = q2[0] - p2[0], q2[1] - p2[1], q2[2] - p2[2]
    r0, r1, r2 = p1[0] - p2[0], p1[1] - p2[1], p1[2] - p2[2]
    a = d10 * d10 + d11 * d11 + d12 * d12
    e = d20 * d20 + d21 * d21 + d22 * d22
    f = d20 * r0 + d21 * r1 + d22 * r2
    c = d10 * r0 + d11 * r1 + d12 * r2
    b = d10 * d20 + d11 * d21 + d12 * d22
    # collapsed edges reduce to point-segment (or point-point)
    if e <= 0.0:
        return (min(max(-c / a, 0.0), 1.0) if a > 0.0 else 0.0), 0.0
    if a <= 0.0:
        return 0.0, min(max(f / e, 0.0), 1.0)
    den = a * e - b * b
    if den > PARALLEL_TOL * a * e:
        s, t = _ee_clamp(min(max((b * f - c * e) / den, 0.0), 1.0), a, b, c, e, f)
        if den > NEAR_PARALLEL * a * e:
            return s, t
    else:
        # parallel: midpoint of the overlap of edge 2 projected onto edge 1
        s0 = -c / a
        s1 = (b - c) / a
        lo = max(0.0, min(s0, s1))
        hi = min(1.0, max(s0, s1))
        if lo <= hi:
            s = 0.5 * (lo + hi)
        elif max(s0, s1) < 0.0:
            s = 0.0
        else:
            s = 1.0
        s, t = _ee_clamp(s, a, b, c, e, f)
    # near parallel the solve above is ill-conditioned (and the midpoint can miss
    # by |d| sin(angle)); switch to the regular solution or an endpoint pairing
    # when one is clearly closer
    best = np.sqrt(_ee_dist2(p1, q1, p2, q2, s, t))
    margin = 1e-12 * (np.sqrt(a) + np.sqrt(e))
    for k in range(5):
        if k == 0:
            if den <= PARALLEL_TOL * a * e:
                continue
            cs, ct = _ee_clamp(min(max((b * f - c * e) / den, 0.0), 1.0), a, b, c, e, f)
        elif k == 1:
            cs, ct = _ee_clamp(0.0, a, b, c, e, f)
        elif k == 2:
            cs, ct = _ee_clamp(1.0, a, b, c, e, f)
        elif k == 3:
            cs, ct = min(max(-c / a, 0.0), 1.0), 0.0
        else:
            cs, ct = min(max((b - c) / a, 0.0), 1.0), 1.0
        dd = np.sqrt(_ee_dist2(p1, q1, p2, q2, cs, ct))
        if dd < best - margin:
            best, s, t = dd, cs, ct
    return s, t


@numba.njit(cache=True)
def _comb_dist(x, i0, i1, i2, i3, c0, c1, c2, c3):
    """|c0 x_i0 + c1 x_i1 + c2 x_i2 + c3 x_i3|."""
    acc = 0.0
    for ax in range(3):
        t = c0 * x[i0, ax] + c1 * x[i1, ax] + c2 * x[i2, ax] + c3 * x[i3, ax]
        acc += t * t
    return np.sqrt(acc)


@numba.njit(cache=True)
def _pt_c(x0, x1, x2, x3):
    u, v, w = pt_weights(x0, x1, x2, x3)
    return 1.0, -u, -v, -w


@numba.njit(cache=True)
def _ee_c(x0, x1, x2, x3):
    s, t = ee_params(x0, x1, x2, x3)
    return 1.0 - s, s, -(1.0 - t), -t


def _unified(c, xs):
    c = np.array(c, dtype=np.float64)
    t = c[0] * xs[0] + c[1] * xs[1] + c[2] * xs[2] + c[3] * xs[3]
    return c, t, float(np.linalg.norm(t))


def _as_points(*xs):
    return [np.ascontiguousarray(x, dtype=np.float64) for x in xs]


def closest_point_triangle(x0, x1, x2, x3):
    """Unified (c, t, d) for point x0 against triangle (x1, x2, x3)."""
    xs = _as_points(x0, x1, x2, x3)
    return _unified(_pt_c(*xs), xs)


def closest_point_edge_edge(x0, x1, x2, x3):
    """Unified (c, t, d) for edge x0-x1 against edge x2-x3."""
    xs = _as_points(x0, x1, x2, x3)
    return _unified(_ee_c(*xs), xs)


# ---------------------------------------------------------------------------
# spatial hash (bucketed by counting sort)


@numba.njit(cache=True)
def _bucket(i, j, k, mask):
    return ((i * 73856093) ^ (j * 19349663) ^ (k * 83492791)) & mask


@numba.njit(cache=True)
def _cell_range(lo, hi, inv_h):
    return (int(np.floor(lo[0] * inv_h)), int(np.floor(lo[1] * inv_h)), int(np.floor(lo[2] * inv_h)),
            int(np.floor(hi[0] * inv_h)), int(np.floor(hi[1] * inv_h)), int(np.floor(hi[2] * inv_h)))


@numba.njit(cache=True)
def _hash_build(lo, hi, inv_h):
    """(start, ids): the primitives overlapping bucket b are ids[start[b]:start[b + 1]]."""
    n = lo.shape[0]
    total = 0
    for p in range(n):
        i0, j0, k0, i1, j1, k1 = _cell_range(lo[p], hi[p], inv_h)
        total += (i1 - i0 + 1) * (j1 - j0 + 1) * (k1 - k0 + 1)
    size = 64
    while size < 2 * total:
        size *= 2
    mask = size - 1
    start = np.zeros(size + 1, np.int64)
    for p in range(n):
        i0, j0, k0, i1, j1, k1 = _cell_range(lo[p], hi[p], inv_h)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                for k in range(k0, k1 + 1):
                    start[_bucket(i, j, k, mask) + 1] += 1
    for b in range(size):
        start[b + 1] += start[b]
    fill = start[:-1].copy()
    ids = np.empty(total, np.int64)
    for p in range(n):
        i0, j0, k0, i1, j1, k1 = _cell_range(lo[p], hi[p], inv_h)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                for k in range(k0, k1 + 1):
                    b = _bucket(i, j, k, mask)
                    ids[fill[b]] = p
                    fill[b] += 1
    return start, ids


@numba.njit(cache=True)
def _hash_query(start, ids, lo, hi, qlo, qhi, inv_h, seen, stamp, out):
    """Candidates whose stored AABB overlaps [qlo, qhi]; returns count written to out."""
    n_out = 0
    mask = start.shape[0] - 2
    i0, j0, k0, i1, j1, k1 = _cell_range(qlo, qhi, inv_h)
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            for k in range(k0, k1 + 1):
                b = _bucket(i, j, k, mask)
                for s in range(start[b], start[b + 1]):
                    c = ids[s]
                    if seen[c] == stamp:
                        continue
                    seen[c] = stamp
                    if (lo[c, 0] <= qhi[0] and hi[c, 0] >= qlo[0] and lo[c, 1] <= qhi[1]
                            and hi[c, 1] >= qlo[1] and lo[c, 2] <= qhi[2] and hi[c, 2] >= qlo[2]):
                        if n_out >= out.shape[0]:
                            return -1
                        out[n_out] = c
                        n_out += 1
    return n_out


def _aabbs(x, prims, pad):
    pts = x[prims]
    return pts.min(axis=1) - pad, pts.max(axis=1) + pad


@dataclass
class SpatialHash:
    """Uniform-grid hash over primitive AABBs (each inflated by ``pad``)."""

    cell_size: float
    pad: float
    lo: np.ndarray
    hi: np.ndarray
    start: np.ndarray
    ids: np.ndarray
    _seen: np.ndarray = field(repr=False)
    _stamp: int = 0

    @classmethod
    def build(cls, x, prims, cell_size: float, pad: float = 0.0) -> "SpatialHash":
        if not cell_size > 0:
            raise ValueError("cell_size must be positive")
        prims = np.asarray(prims, dtype=np.int64)
        if prims.ndim == 1:
            prims = prims[:, None]
        lo, hi = _aabbs(np.asarray(x, dtype=np.float64), prims, pad)
        start, ids = _hash_build(lo, hi, 1.0 / cell_size)
        return cls(cell_size, pad, lo, hi, start, ids, np.full(len(prims), -1, np.int64))

    def query(self, qlo, qhi) -> np.ndarray:
        qlo = np.asarray(qlo, dtype=np.float64) - self.pad
        qhi = np.asarray(qhi, dtype=np.float64) + self.pad
        self._stamp += 1
        out = np.empty(len(self.lo), np.int64)
        n = _hash_query(self.start, self.ids, self.lo, self.hi, qlo, qhi,
                        1.0 / self.cell_size, self._seen, self._stamp, out)
        return np.sort(out[:n])


def spatial_hash_build(x, cell_size, prims=None, pad=0.0) -> SpatialHash:
    """Hash points (default: every row of x) or primitives given as index tuples."""
    x = np.asarray(x, dtype=np.float64)
    if prims is None:
        prims = np.arange(len(x))
    return SpatialHash.build(x, prims, cell_size, pad)


def spatial_hash_query(h: SpatialHash, x, primitive) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)[np.atleast_1d(primitive)]
    return h.query(pts.min(axis=0), pts.max(axis=0))


# ---------------------------------------------------------------------------
# narrow phase over hashed candidates


@numba.njit(cache=True)
def _sorted_contains(arr, key):
    i = np.searchsorted(arr, key)
    return i < arr.shape[0] and arr[i] == key


@numba.njit(cache=True)
def _grow(a, n):
    b = np.empty((max(2 * a.shape[0], n),) + a.shape[1:], a.dtype)
    b[: a.shape[0]] = a
    return b


@numba.njit(cache=True)
def _detect(x, points, tris, edges, d_max, pad, inv_h, excl_pt, excl_ee, use_excl,
            point_obj, tri_obj, edge_obj, same_object_only):
    """All PT / EE pairs with 0 < d < d_max (non-adjacent, not excluded).

    Returns (kind, prim_a, prim_b, verts, c, dist, n, fault); fault >= 0 marks
    the record index of a pair found at d <= 0.
    """
    cap = 1024
    kind = np.empty(cap, np.int64)
    pa = np.empty(cap, np.int64)
    pb = np.empty(cap, np.int64)
    verts = np.empty((cap, 4), np.int64)
    coef = np.empty((cap, 4), np.float64)
    dist = np.empty(cap, np.float64)
    n = 0
    fault = -1
    n_tris = tris.shape[0]
    n_edges = edges.shape[0]

    # PT: triangles hashed, points query
    tlo = np.empty((n_tris, 3))
    thi = np.empty((n_tris, 3))
    for f in range(n_tris):
        for ax in range(3):
            a = x[tris[f, 0], ax]
            b = x[tris[f, 1], ax]
            c = x[tris[f, 2], ax]
            tlo[f, ax] = min(a, min(b, c)) - pad
            thi[f, ax] = max(a, max(b, c)) + pad
    if n_tris > 0 and points.shape[0] > 0:
        start, ids = _hash_build(tlo, thi, inv_h)
        seen = np.full(n_tris, -1, np.int64)
        buf = np.empty(n_tris, np.int64)
        qlo = np.empty(3)
        qhi = np.empty(3)
        for ip in range(points.shape[0]):
            v = points[ip]
            for ax in range(3):
                qlo[ax] = x[v, ax] - pad
                qhi[ax] = x[v, ax] + pad
            m = _hash_query(start, ids, tlo, thi, qlo, qhi, inv_h, seen, ip, buf)
            for jj in range(m):
                f = buf[jj]
                a, b, c = tris[f, 0], tris[f, 1], tris[f, 2]
                if v == a or v == b or v == c:
                    continue
                if same_object_only and point_obj[ip] != tri_obj[f]:
                    continue
                if use_excl and _sorted_contains(excl_pt, v * n_tris + f):
                    continue
                c0, c1, c2, c3 = _pt_c(x[v], x[a], x[b], x[c])
                d = _comb_dist(x, v, a, b, c, c0, c1, c2, c3)
                if d < d_max:
                    if n >= kind.shape[0]:
                        kind = _grow(kind, n + 1)
                        pa = _grow(pa, n + 1)
                        pb = _grow(pb, n + 1)
                        verts = _grow(verts, n + 1)
                        coef = _grow(coef, n + 1)
                        dist = _grow(dist, n + 1)
                    kind[n] = 0
                    pa[n] = v
                    pb[n] = f
                    verts[n, 0] = v
                    verts[n, 1] = a
                    verts[n, 2] = b
                    verts[n, 3] = c
                    coef[n, 0] = c0
                    coef[n, 1] = c1
                    coef[n, 2] = c2
                    coef[n, 3] = c3
                    dist[n] = d
                    if d <= 0.0 and fault < 0:
                        fault = n
                    n += 1

    # EE: edges hashed, edges query (each unordered pair once)
    if n_edges > 1:
        elo = np.empty((n_edges, 3))
        ehi = np.empty((n_edges, 3))
        for e in range(n_edges):
            for ax in range(3):
                a = x[edges[e, 0], ax]
                b = x[edges[e, 1], ax]
                elo[e, ax] = min(a, b) - pad
                ehi[e, ax] = max(a, b) + pad
        start, ids = _hash_build(elo, ehi, inv_h)
        seen = np.full(n_edges, -1, np.int64)
        buf = np.empty(n_edges, np.int64)
        for e1 in range(n_edges):
            m = _hash_query(start, ids, elo, ehi, elo[e1], ehi[e1], inv_h, seen, e1, buf)
            a, b = edges[e1, 0], edges[e1, 1]
            for jj in range(m):
                e2 = buf[jj]
                if e2 <= e1:
                    continue
                c_, d_ = edges[e2, 0], edges[e2, 1]
                if a == c_ or a == d_ or b == c_ or b == d_:
                    continue
                if same_object_only and edge_obj[e1] != edge_obj[e2]:
                    continue
                if use_excl and _sorted_contains(excl_ee, e1 * n_edges + e2):
                    continue
                c0, c1, c2, c3 = _ee_c(x[a], x[b], x[c_], x[d_])
                d = _comb_dist(x, a, b, c_, d_, c0, c1, c2, c3)
                if d < d_max:
                    if n >= kind.shape[0]:
                        kind = _grow(kind, n + 1)
                        pa = _grow(pa, n + 1)
                        pb = _grow(pb, n + 1)
                        verts = _grow(verts, n + 1)
                        coef = _grow(coef, n + 1)
                        dist = _grow(dist, n + 1)
                    kind[n] = 1
                    pa[n] = e1
                    pb[n] = e2
                    verts[n, 0] = a
                    verts[n, 1] = b
                    verts[n, 2] = c_
                    verts[n, 3] = d_
                    coef[n, 0] = c0
                    coef[n, 1] = c1
                    coef[n, 2] = c2
                    coef[n, 3] = c3
                    dist[n] = d
                    if d <= 0.0 and fault < 0:
                        fault = n
                    n += 1
    return kind[:n], pa[:n], pb[:n], verts[:n], coef[:n], dist[:n], fault


# ---------------------------------------------------------------------------
# exclusion table


@dataclass(frozen=True)
class ExclusionTable:
    """Primitive pairs close at rest; never turned into constraints.

    PT pairs are keyed ``vertex * n_faces + face``, EE pairs
    ``e1 * n_edges + e2`` with ``e1 < e2``.
    """

    pt_keys: np.ndarray
    ee_keys: np.ndarray
    n_faces: int
    n_edges: int
    entries: frozenset = frozenset()

    @classmethod
    def empty(cls, mesh: TetMesh) -> "ExclusionTable":
        z = np.zeros(0, np.int64)
        return cls(z, z, len(mesh.surface_faces), len(mesh.surface_edges))

    def __len__(self):
        return len(self.pt_keys) + len(self.ee_keys)

    def contains(self, kind, verts) -> bool:
        return canonical(kind, verts) in self.entries


def canonical(kind, verts):
    v = [int(i) for i in verts]
    if Kind(kind) is Kind.PT:
        return (int(Kind.PT), v[0]) + tuple(sorted(v[1:]))
    e1, e2 = tuple(sorted(v[:2])), tuple(sorted(v[2:]))
    return (int(Kind.EE),) + min(e1, e2) + max(e1, e2)


def _surface_objects(mesh: TetMesh):
    return (
        mesh.vertex_object[mesh.surface_vertices],
        mesh.vertex_object[mesh.surface_faces[:, 0]],
        mesh.vertex_object[mesh.surface_edges[:, 0]],
    )


def default_cell_size(mesh: TetMesh, d_hat: float) -> float:
    return max(d_hat, mesh.average_surface_edge_length())


def build_exclusion_table(mesh: TetMesh, d_hat: float, factor: float = 1.5) -> ExclusionTable:
    """Same-object PT/EE pairs closer than ``factor * d_hat`` in the rest pose."""
    x = mesh.vertices_rest
    d_max = factor * d_hat
    pobj, fobj, eobj = _surface_objects(mesh)
    z = np.zeros(0, np.int64)
    kind, pa, pb, verts, _, dist, fault = _detect(
        x, mesh.surface_vertices, mesh.surface_faces, mesh.surface_edges, d_max, 0.5 * d_max,
        1.0 / max(d_max, mesh.average_surface_edge_length()), z, z, False, pobj, fobj, eobj, True,
    )
    if fault >= 0:
        raise PenetrationError("rest pose has touching primitives", tuple(verts[fault]))
    nf, ne = len(mesh.surface_faces), len(mesh.surface_edges)
    pt = np.sort(pa[kind == 0] * nf + pb[kind == 0])
    ee = np.sort(pa[kind == 1] * ne + pb[kind == 1])
    entries = frozenset(canonical(k, v) for k, v in zip(kind, verts))
    return ExclusionTable(pt, ee, nf, ne, entries)


# ---------------------------------------------------------------------------
# constraint sets and their kernels


@dataclass
class ConstraintSet:
    """Active PT/EE constraints for one configuration."""

    kind: np.ndarray
    verts: np.ndarray
    c: np.ndarray
    t: np.ndarray
    d: np.ndarray
    kappa: float
    d_hat: float
    prims: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.d)

    @classmethod
    def empty(cls, kappa, d_hat):
        return cls(np.zeros(0, np.int64), np.zeros((0, 4), np.int64), np.zeros((0, 4)),
                   np.zeros((0, 3)), np.zeros(0), kappa, d_hat, np.zeros((0, 2), np.int64))

    def _td(self, x):
        if x is None:
            return self.t, self.d
        t = np.einsum("mk,mki->mi", self.c, x[self.verts])
        return t, np.linalg.norm(t, axis=1)

    def _scalars(self, d):
        db, ddb = barrier_derivatives(d, self.d_hat)
        a = self.kappa * (ddb / d**2 - db / d**3)
        b = self.kappa * db / d
        return a, b

    def energy(self, x=None) -> float:
        if len(self) == 0:
            return 0.0
        _, d = self._td(x)
        return float(self.kappa * np.sum(barrier(d, self.d_hat)))

    def local_gradients(self, x=None) -> np.ndarray:
        """(m, 4, 3): kappa b'(d)/d * c_i t for each constraint vertex."""
        t, d = self._td(x)
        db, _ = barrier_derivatives(d, self.d_hat)
        s = self.kappa * db / d
        return s[:, None, None] * self.c[:, :, None] * t[:, None, :]

    def local_diag_hessians(self, x=None, projected: bool = False) -> np.ndarray:
        """(m, 4, 3) Hessian diagonals.

        With ``projected`` only the positive normal eigenpair kappa b'' (c t/d)^2
        is kept; the tangential eigenvalue kappa b'/d is negative.
        """
        t, d = self._td(x)
        if projected:
            _, ddb = barrier_derivatives(d, self.d_hat)
            ct = self.c[:, :, None] * (t / d[:, None])[:, None, :]
            return (self.kappa * ddb)[:, None, None] * ct**2
        a, b = self._scalars(d)
        ct = self.c[:, :, None] * t[:, None, :]
        return a[:, None, None] * ct**2 + (b[:, None] * self.c**2)[:, :, None]

    def local_quadratic_forms(self, p: np.ndarray, x=None, sel=None, projected: bool = False) -> np.ndarray:
        t, d = self._td(x)
        c, verts = self.c, self.verts
        if sel is not None:
            t, d, c, verts = t[sel], d[sel], c[sel], verts[sel]
        w = np.einsum("mk,mki->mi", c, p[verts])
        if projected:
            _, ddb = barrier_derivatives(d, self.d_hat)
            return self.kappa * ddb * (np.einsum("mi,mi->m", w, t) / d) ** 2
        a, b = self._scalars(d)
        return a * np.einsum("mi,mi->m", w, t) ** 2 + b * np.einsum("mi,mi->m", w, w)

    def gradient(self, n: int, x=None) -> np.ndarray:
        return scatter(self.verts, self.local_gradients(x), n)

    def diag_hessian(self, n: int, x=None, projected: bool = False) -> np.ndarray:
        return scatter(self.verts, self.local_diag_hessians(x, projected), n)

    def quadratic_form(self, p: np.ndarray, x=None, projected: bool = False) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sum(self.local_quadratic_forms(p, x, projected=projected)))

    def vertex_lists(self):
        return self.verts


def scatter(verts: np.ndarray, local: np.ndarray, n: int) -> np.ndarray:
    """Sum per-primitive (m, k, 3) contributions onto (n, 3) vertex rows."""
    idx = verts.ravel()
    vals = local.reshape(-1, 3)
    out = np.empty((n, 3))
    for ax in range(3):
        out[:, ax] = np.bincount(idx, weights=vals[:, ax], minlength=n)
    return out


def compute_constraint_set(mesh: TetMesh, x, d_hat: float, kappa: float = 1.0,
                           exclusion: ExclusionTable | None = None,
                           cell_size: float | None = None) -> ConstraintSet:
    """Every non-adjacent surface PT/EE pair with 0 < d < d_hat, canonically ordered."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if cell_size is None:
        cell_size = default_cell_size(mesh, d_hat)
    if exclusion is None:
        exclusion = ExclusionTable.empty(mesh)
    pobj, fobj, eobj = _surface_objects(mesh)
    kind, pa, pb, verts, c, d, fault = _detect(
        x, mesh.surface_vertices, mesh.surface_faces, mesh.surface_edges, d_hat, 0.5 * d_hat,
        1.0 / cell_size, exclusion.pt_keys, exclusion.ee_keys, len(exclusion) > 0,
        pobj, fobj, eobj, False,
    )
    if fault >= 0:
        raise PenetrationError(
            f"penetration: {Kind(kind[fault]).name} pair {tuple(verts[fault])} at d={d[fault]:.3e}",
            tuple(verts[fault]),
        )
    order = np.lexsort((pb, pa, kind))
    kind, pa, pb, verts, c, d = kind[order], pa[order], pb[order], verts[order], c[order], d[order]
    t = np.einsum("mk,mki->mi", c, x[verts])
    return ConstraintSet(kind, verts, c, t, d, kappa, d_hat, np.stack([pa, pb], axis=1))


def barrier_gradient_scatter(cs: ConstraintSet, x) -> np.ndarray:
    return cs.gradient(len(x), x)


def barrier_diag_hessian_scatter(cs: ConstraintSet, x) -> np.ndarray:
    return cs.diag_hessian(len(x), x)


def barrier_quadratic_form(cs: ConstraintSet, x, p) -> float:
    return cs.quadratic_form(np.asarray(p).reshape(-1, 3), x)


# ---------------------------------------------------------------------------
# analytic half-spaces (floors, moving walls)


@dataclass(frozen=True)
class HalfSpace:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))

    def signed_distance(self, x):
        return (np.asarray(x) - self.point) @ self.normal


@dataclass
class PlaneConstraintSet:
    """Vertex / half-space constraints; d is the signed distance, so d2d/dx2 = 0."""

    vertex: np.ndarray
    normal: np.ndarray
    offset: np.ndarray
    kappa: float
    d_hat: float

    def __len__(self):
        return len(self.vertex)

    def _d(self, x):
        if x is None:
            raise ValueError("positions required")
        return np.einsum("mi,mi->m", x[self.vertex], self.normal) - self.offset

    @property
    def verts(self):
        return self.vertex[:, None]

    def energy(self, x) -> float:
        if len(self) == 0:
            return 0.0
        return float(self.kappa * np.sum(barrier(self._d(x), self.d_hat)))

    def gradient(self, n, x) -> np.ndarray:
        db, _ = barrier_derivatives(self._d(x), self.d_hat)
        return scatter(self.verts, (self.kappa * db)[:, None, None] * self.normal[:, None, :], n)

    def diag_hessian(self, n, x, projected: bool = False) -> np.ndarray:
        _, ddb = barrier_derivatives(self._d(x), self.d_hat)
        return scatter(self.verts, (self.kappa * ddb)[:, None, None] * self.normal[:, None, :] ** 2, n)

    def local_quadratic_forms(self, p, x=None, sel=None, projected: bool = False):
        vertex, normal, offset = self.vertex, self.normal, self.offset
        if sel is not None:
            vertex, normal, offset = vertex[sel], normal[sel], offset[sel]
        d = np.einsum("mi,mi->m", x[vertex], normal) - offset
        _, ddb = barrier_derivatives(d, self.d_hat)
        return self.kappa * ddb * np.einsum("mi,mi->m", p[vertex], normal) ** 2

    def quadratic_form(self, p, x) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sum(self.local_quadratic_forms(p, x)))


def ground_contact_constraints(x, half_spaces, d_hat, kappa=1.0, vertices=None) -> PlaneConstraintSet:
    """Vertices within d_hat of any half-space boundary; d <= 0 is a penetration fault."""
    x = np.asarray(x, dtype=np.float64)
    vertices = np.arange(len(x)) if vertices is None else np.asarray(vertices)
    if isinstance(half_spaces, HalfSpace):
        half_spaces = [half_spaces]
    vs, ns, offs = [], [], []
    for hs in half_spaces:
        d = hs.signed_distance(x[vertices])
        if np.any(d <= 0):
            i = int(np.argmin(d))
            raise PenetrationError(
                f"vertex {vertices[i]} crossed a half-space (d={d[i]:.3e})", (int(vertices[i]),)
            )
        act = d < d_hat
        vs.append(vertices[act])
        ns.append(np.broadcast_to(hs.normal, (int(act.sum()), 3)))
        offs.append(np.full(int(act.sum()), float(hs.point @ hs.normal)))
    if not vs:
        return PlaneConstraintSet(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0), kappa, d_hat)
    return PlaneConstraintSet(
        np.concatenate(vs).astype(np.int64), np.concatenate(ns), np.concatenate(offs), kappa, d_hat
    )
