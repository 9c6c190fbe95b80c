"""Slow, independent reference computations used by the test-suite.

Nothing in here is called from the simulation path.
"""
from __future__ import annotations

import numpy as np

from . import contact
from .elasticity import (
    MaterialModel, cofactor, psi_derivative_values, svd_rv, twist_modes, vec,
)
from .mesh import TetMesh


def fd_gradient(energy, x, step=None) -> np.ndarray:
    """Central differences with step 1e-6 * (1 + |x_i|)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        h = 1e-6 * (1.0 + abs(flat[i])) if step is None else step
        old = flat[i]
        flat[i] = old + h
        ep = energy(x)
        flat[i] = old - h
        em = energy(x)
        flat[i] = old
        if not (np.isfinite(ep) and np.isfinite(em)):
            raise FloatingPointError(f"non-finite energy probing coordinate {i}")
        g[i] = (ep - em) / (2.0 * h)
    return g.reshape(x.shape)


def fd_jacobian(func, x, step=1e-6) -> np.ndarray:
    """Columns d func / d x_i by central differences (func returns a flat vector)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = np.array(func(x), dtype=np.float64).ravel()
        flat[i] = old - step
        fm = np.array(func(x), dtype=np.float64).ravel()
        flat[i] = old
        cols.append((fp - fm) / (2 * step))
    return np.stack(cols, axis=1)


def cross_matrix(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def invariant_hessians(F):
    """Dense 9x9 H1, H2, H3 (column-major vec) for one deformation gradient."""
    F = np.asarray(F, dtype=np.float64)
    U, s, V = svd_rv(F[None])
    Q, lam = twist_modes(U, s, V)
    q = vec(Q[0])
    H1 = sum(lam[0, i] * np.outer(q[i], q[i]) for i in range(3))
    H2 = 2.0 * np.eye(9)
    f0, f1, f2 = (cross_matrix(F[:, j]) for j in range(3))
    Z = np.zeros((3, 3))
    H3 = np.block([[Z, -f2, f1], [f2, Z, -f0], [-f1, f0, Z]])
    return H1, H2, H3


def dense_dpsi_dF2(material: MaterialModel, F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    U, s, V = svd_rv(F[None])
    R = U[0] @ V[0].T
    I1, I2, I3 = s[0].sum(), np.sum(F * F), np.linalg.det(F)
    d1, d2, d3, dd1, dd2, dd3 = (
        float(v) for v in psi_derivative_values(material.model, material.mu, material.lam,
                                                np.float64(I1), np.float64(I2), np.float64(I3))
    )
    g1, g2, g3 = vec(R), 2.0 * vec(F), vec(cofactor(F))
    H1, H2, H3 = invariant_hessians(F)
    return (dd1 * np.outer(g1, g1) + dd2 * np.outer(g2, g2) + dd3 * np.outer(g3, g3)
            + d1 * H1 + d2 * H2 + d3 * H3)


def dense_element_hessian(mesh: TetMesh, x, tet: int, material: MaterialModel) -> np.ndarray:
    """V * dFdx^T (d2Psi/dF2) dFdx as a 12x12 matrix."""
    T = mesh.tets[tet]
    F = np.einsum("vi,vj->ij", np.asarray(x)[T], mesh.grad_op[tet])
    dFdx = mesh.dFdx[tet]
    return mesh.rest_volume[tet] * dFdx.T @ dense_dpsi_dF2(material, F) @ dFdx


def dt_dx(c) -> np.ndarray:
    """(dt/dx)^T, 12x3, for t = sum c_i x_i."""
    return np.concatenate([ci * np.eye(3) for ci in c], axis=0)


def dense_constraint_hessian(c, t, kappa, d_hat) -> np.ndarray:
    """kappa * d2b/dx2 for one unified constraint, by explicit outer products."""
    c = np.asarray(c, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    d = np.linalg.norm(t)
    db, ddb = contact.barrier_derivatives(d, d_hat)
    J = dt_dx(c)
    Jt = J @ t
    return kappa * ((ddb / d**2 - db / d**3) * np.outer(Jt, Jt) + db / d * J @ J.T)


def dense_barrier_hessian(cs: contact.ConstraintSet, n: int) -> np.ndarray:
    H = np.zeros((3 * n, 3 * n))
    for k in range(len(cs)):
        idx = np.concatenate([3 * v + np.arange(3) for v in cs.verts[k]])
        H[np.ix_(idx, idx)] += dense_constraint_hessian(cs.c[k], cs.t[k], cs.kappa, cs.d_hat)
    return H


# ---------------------------------------------------------------------------
# distances by grid search + projected gradient


def _project_simplex(v):
    """Euclidean projection of rows of v onto the probability simplex."""
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(v)), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def _refine(points, w0, project, iters):
    """Accelerated projected gradient on |sum_k w_k P_k|^2 for a batch of problems."""
    A = points  # (b, k, 3)
    G = np.einsum("bki,bli->bkl", A, A)
    L = np.linalg.eigvalsh(G)[:, -1][:, None] + 1e-300
    w = w0.copy()
    z = w.copy()
    tk = 1.0
    for _ in range(iters):
        grad = np.einsum("bkl,bl->bk", G, z)
        w_new = project(z - grad / L)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        z = w_new + ((tk - 1.0) / t_new) * (w_new - w)
        # restart when the objective goes up
        f_new = np.einsum("bk,bkl,bl->b", w_new, G, w_new)
        f_old = np.einsum("bk,bkl,bl->b", w, G, w)
        up = f_new > f_old
        z[up] = w_new[up]
        w, tk = w_new, (1.0 if up.all() else t_new)
    return w, G


def _chunked_argmin(diff_of, n, chunk=256):
    best = np.empty(n, np.int64)
    dmin = np.empty(n)
    for a in range(0, n, chunk):
        sl = slice(a, min(a + chunk, n))
        diff = diff_of(sl)
        d2 = np.einsum("bgi,bgi->bg", diff, diff)
        best[sl] = np.argmin(d2, axis=1)
        dmin[sl] = d2[np.arange(len(d2)), best[sl]]
    return best, dmin


def brute_force_pt_distance(x0, x1, x2, x3, grid_n=100, iters=3000) -> np.ndarray:
    """Batch point-triangle distances over a barycentric grid, then refined."""
    x0, x1, x2, x3 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x0, x1, x2, x3))
    i, j = np.meshgrid(np.arange(grid_n + 1), np.arange(grid_n + 1), indexing="ij")
    keep = i + j <= grid_n
    u = (i[keep] / grid_n)[None, :, None]
    v = (j[keep] / grid_n)[None, :, None]
    e1 = (x2 - x1)[:, None, :]
    e2 = (x3 - x1)[:, None, :]
    r = (x1 - x0)[:, None, :]
    best, dmin = _chunked_argmin(lambda sl: r[sl] + u * e1[sl] + v * e2[sl], len(x0))
    ub, vb = u[0, best, 0], v[0, best, 0]
    w0 = np.stack([1.0 - ub - vb, ub, vb], axis=1)
    # minimise |sum w_k (x_k - x0)| over the simplex
    P = np.stack([x1 - x0, x2 - x0, x3 - x0], axis=1)
    w, G = _refine(P, w0, _project_simplex, iters)
    val = np.einsum("bk,bkl,bl->b", w, G, w)
    return np.sqrt(np.maximum(np.minimum(val, dmin), 0.0))


def _project_box(v):
    return np.clip(v, 0.0, 1.0)


def brute_force_ee_distance(x0, x1, x2, x3, grid_n=100, iters=3000) -> np.ndarray:
    x0, x1, x2, x3 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x0, x1, x2, x3))
    s = np.linspace(0.0, 1.0, grid_n + 1)
    S, T = np.meshgrid(s, s, indexing="ij")
    S, T = S.ravel()[None, :, None], T.ravel()[None, :, None]
    d1 = (x1 - x0)[:, None, :]
    d2 = (x3 - x2)[:, None, :]
    r = (x0 - x2)[:, None, :]
    best, dmin = _chunked_argmin(lambda sl: r[sl] + S * d1[sl] - T * d2[sl], len(x0))
    w0 = np.stack([S[0, best, 0], T[0, best, 0]], axis=1)
    # f(s, t) = |r + s d1 - t d2|^2 written as |[r, d1, -d2] . [1, s, t]|^2
    A = np.stack([(x0 - x2), (x1 - x0), -(x3 - x2)], axis=1)
    Gfull = np.einsum("bki,bli->bkl", A, A)
    H = Gfull[:, 1:, 1:]
    lin = Gfull[:, 0, 1:]
    L = np.linalg.eigvalsh(H)[:, -1][:, None] + 1e-300
    w = w0.copy()
    z = w.copy()
    tk = 1.0

    def f(q):
        return Gfull[:, 0, 0] + 2 * np.einsum("bk,bk->b", lin, q) + np.einsum("bk,bkl,bl->b", q, H, q)

    for _ in range(iters):
        grad = lin + np.einsum("bkl,bl->bk", H, z)
        w_new = _project_box(z - grad / L)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        z = w_new + ((tk - 1.0) / t_new) * (w_new - w)
        up = f(w_new) > f(w)
        z[up] = w_new[up]
        w, tk = w_new, (1.0 if up.all() else t_new)
    return np.sqrt(np.maximum(np.minimum(f(w), dmin), 0.0))


def brute_force_distance(kind, x0, x1, x2, x3, grid_n=100) -> float:
    if grid_n < 100:
        raise ValueError("grid_n must be at least 100")
    fn = brute_force_pt_distance if contact.Kind(kind) is contact.Kind.PT else brute_force_ee_distance
    return float(fn(x0, x1, x2, x3, grid_n)[0])


# ---------------------------------------------------------------------------
# all-pairs enumeration


def all_pairs_constraints(mesh: TetMesh, x, d_max, exclusion=None, same_object_only=False):
    """{canonical key: d} for every non-adjacent surface pair with d < d_max (O(n^2))."""
    x = np.asarray(x, dtype=np.float64)
    obj = mesh.vertex_object
    out = {}
    for v in mesh.surface_vertices:
        for f in mesh.surface_faces:
            if v in f or (same_object_only and obj[v] != obj[f[0]]):
                continue
            verts = (v, *f)
            if exclusion is not None and exclusion.contains(contact.Kind.PT, verts):
                continue
            _, _, d = contact.closest_point_triangle(*x[list(verts)])
            if d < d_max:
                out[contact.canonical(contact.Kind.PT, verts)] = d
    E = mesh.surface_edges
    for i in range(len(E)):
        for j in range(i + 1, len(E)):
            if set(E[i]) & set(E[j]):
                continue
            if same_object_only and obj[E[i][0]] != obj[E[j][0]]:
                continue
            verts = (*E[i], *E[j])
            if exclusion is not None and exclusion.contains(contact.Kind.EE, verts):
                continue
            _, _, d = contact.closest_point_edge_edge(*x[list(verts)])
            if d < d_max:
                out[contact.canonical(contact.Kind.EE, verts)] = d
    return out
