"""Invariant-based hyperelasticity on linear tets.

Energies are written as Psi(I1, I2, I3) with I1 = tr(S), I2 = |F|^2 and
I3 = det F.  The element Hessian splits into six terms

    d2Psi/dx2 = sum_i Psi_ii h_i + Psi_i h_{i+3},

with h_i = dFdx^T g_i g_i^T dFdx and h_{i+3} = dFdx^T H_i dFdx, so both its
diagonal and p^T H p are evaluated without forming a 12x12 matrix.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numba
import numpy as np

from .mesh import TetMesh, deformation_gradients

TWIST_DENOM_FLOOR = 1e-6
_SQRT1_2 = np.sqrt(0.5)

# Unit-free twist generators T_i (antisymmetric), one per rotation axis.
TWISTS = np.array(
    [
        [[0, 0, 0], [0, 0, 1], [0, -1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, 1, 0], [-1, 0, 0], [0, 0, 0]],
    ],
    dtype=np.float64,
)
# sigma pairs that set the eigenvalue of each twist mode
_TWIST_PAIRS = ((1, 2), (0, 2), (0, 1))


class Model(str, enum.Enum):
    NEO_HOOKEAN = "nh"
    STABLE_NEO_HOOKEAN = "snh"
    ARAP = "arap"
    FIXED_COROTATED = "fcr"

    @classmethod
    def parse(cls, name: str) -> "Model":
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "nh": cls.NEO_HOOKEAN, "neohookean": cls.NEO_HOOKEAN,
            "snh": cls.STABLE_NEO_HOOKEAN, "stableneohookean": cls.STABLE_NEO_HOOKEAN,
            "arap": cls.ARAP, "asrigidaspossible": cls.ARAP,
            "fcr": cls.FIXED_COROTATED, "fixedcorotated": cls.FIXED_COROTATED,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown material model {name!r}") from None


class InvertedElementError(ArithmeticError):
    """Energy evaluated outside its domain (NH with det F <= 0)."""

    def __init__(self, tets):
        self.tets = np.atleast_1d(tets)
        super().__init__(f"{len(self.tets)} inverted element(s), first: {self.tets[0]}")


@dataclass(frozen=True)
class MaterialModel:
    model: Model
    mu: float
    lam: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.model is Model.STABLE_NEO_HOOKEAN and self.lam == 0:
            raise ValueError("stable Neo-Hookean needs lambda > 0")

    @classmethod
    def from_young(cls, model, youngs: float, poisson: float) -> "MaterialModel":
        mu = youngs / (2.0 * (1.0 + poisson))
        lam = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
        return cls(Model.parse(model) if isinstance(model, str) else model, mu, lam)

    @property
    def needs_positive_det(self) -> bool:
        return self.model is Model.NEO_HOOKEAN


@dataclass
class InvariantState:
    F: np.ndarray
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    R: np.ndarray
    S: np.ndarray
    I1: float
    I2: float
    I3: float


def vec(A: np.ndarray) -> np.ndarray:
    """Column-major flattening of (..., 3, 3) matrices."""
    return np.swapaxes(A, -1, -2).reshape(A.shape[:-2] + (9,))


def unvec(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a.reshape(a.shape[:-1] + (3, 3)), -1, -2)


def svd_rv(F: np.ndarray):
    """Rotation-variant SVD: U, V proper rotations, reflection kept in sigma[..., 2]."""
    U, s, Vt = np.linalg.svd(F)
    V = np.swapaxes(Vt, -1, -2).copy()
    U = U.copy()
    s = s.copy()
    fu = np.linalg.det(U) < 0
    U[fu, :, 2] *= -1.0
    s[fu, 2] *= -1.0
    fv = np.linalg.det(V) < 0
    V[fv, :, 2] *= -1.0
    s[fv, 2] *= -1.0
    return U, s, V


def cofactor(F: np.ndarray) -> np.ndarray:
    """dI3/dF: columns f1 x f2, f2 x f0, f0 x f1."""
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.stack([np.cross(f1, f2), np.cross(f2, f0), np.cross(f0, f1)], axis=-1)


def det3(F: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", F[..., :, 0], np.cross(F[..., :, 1], F[..., :, 2]))


def svd_polar(F) -> InvariantState:
    F = np.asarray(F, dtype=np.float64)
    U, s, V = svd_rv(F[None])
    U, s, V = U[0], s[0], V[0]
    R = U @ V.T
    S = V @ np.diag(s) @ V.T
    return InvariantState(F, U, s, V, R, S, float(s.sum()), float((F * F).sum()), float(det3(F)))


# ---------------------------------------------------------------------------
# energy densities as functions of the invariants


def psi_values(model: Model, mu, lam, I1, I2, I3):
    if model is Model.NEO_HOOKEAN:
        logJ = np.log(I3)
        return 0.5 * mu * (I2 - 3.0) - mu * logJ + 0.5 * lam * logJ**2
    if model is Model.STABLE_NEO_HOOKEAN:
        return 0.5 * mu * (I2 - 3.0) + 0.5 * lam * (I3 - 1.0 - mu / lam) ** 2
    if model is Model.ARAP:
        return 0.5 * mu * (I2 - 2.0 * I1 + 3.0)
    if model is Model.FIXED_COROTATED:
        return mu * (I2 - 2.0 * I1 + 3.0) + 0.5 * lam * (I3 - 1.0) ** 2
    raise ValueError(model)


def psi_derivative_values(model: Model, mu, lam, I1, I2, I3):
    """(dPsi/dI1, dPsi/dI2, dPsi/dI3, d2Psi/dI1^2, d2Psi/dI2^2, d2Psi/dI3^2).

    Mixed second derivatives vanish for every supported model.
    """
    zero = np.zeros_like(I3)
    mu = mu + zero
    lam = lam + zero
    if model is Model.NEO_HOOKEAN:
        logJ = np.log(I3)
        return (zero, 0.5 * mu, (lam * logJ - mu) / I3,
                zero, zero, (mu + lam - lam * logJ) / I3**2)
    if model is Model.STABLE_NEO_HOOKEAN:
        return zero, 0.5 * mu, lam * (I3 - 1.0) - mu, zero, zero, lam
    if model is Model.ARAP:
        return -mu, 0.5 * mu, zero, zero, zero, zero
    if model is Model.FIXED_COROTATED:
        return -2.0 * mu, mu, lam * (I3 - 1.0), zero, zero, lam
    raise ValueError(model)


def _check_domain(material: MaterialModel, I3, index=None):
    if material.needs_positive_det:
        bad = np.flatnonzero(~(np.asarray(I3) > 0))
        if len(bad):
            raise InvertedElementError(bad if index is None else np.asarray(index)[bad])


def psi(material: MaterialModel, inv: InvariantState) -> float:
    _check_domain(material, inv.I3)
    return float(psi_values(material.model, material.mu, material.lam, inv.I1, inv.I2, inv.I3))


def psi_derivatives(material: MaterialModel, inv: InvariantState):
    _check_domain(material, inv.I3)
    d = psi_derivative_values(
        material.model, material.mu, material.lam,
        np.float64(inv.I1), np.float64(inv.I2), np.float64(inv.I3),
    )
    return tuple(float(v) for v in d)


def invariant_gradients(inv: InvariantState):
    """g1 = vec(R), g2 = 2 vec(F), g3 = vec(cof F)."""
    return vec(inv.R), 2.0 * vec(inv.F), vec(cofactor(inv.F))


def twist_modes(U: np.ndarray, sigma: np.ndarray, V: np.ndarray):
    """Eigen-pairs of d2 I1 / dF2: Q_i = U T_i V^T / sqrt(2), lambda_i = 2/(s_j + s_k)."""
    Q = _SQRT1_2 * np.einsum("...ab,ibc,...dc->...iad", U, TWISTS, V)
    lam = np.stack(
        [2.0 / np.maximum(sigma[..., j] + sigma[..., k], TWIST_DENOM_FLOOR) for j, k in _TWIST_PAIRS],
        axis=-1,
    )
    return Q, lam


# ---------------------------------------------------------------------------
# fused per-tet kernels

_MODEL_ID = {
    Model.NEO_HOOKEAN: 0, Model.STABLE_NEO_HOOKEAN: 1, Model.ARAP: 2, Model.FIXED_COROTATED: 3,
}


@numba.njit(cache=True)
def _sym_eig3(A, w, V):
    """Cyclic Jacobi on a symmetric 3x3 (overwritten); eigenvalues descending, V a rotation."""
    a = A
    for i in range(3):
        for j in range(3):
            V[i, j] = 1.0 if i == j else 0.0
    for _ in range(32):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        scale = a[0, 0] ** 2 + a[1, 1] ** 2 + a[2, 2] ** 2
        if off <= 1e-36 * scale or off == 0.0:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(3):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(3):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(3):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq
    for i in range(3):
        w[i] = a[i, i]
    # sort descending
    for i in range(2):
        m = i
        for j in range(i + 1, 3):
            if w[j] > w[m]:
                m = j
        if m != i:
            w[i], w[m] = w[m], w[i]
            for k in range(3):
                V[k, i], V[k, m] = V[k, m], V[k, i]
    det = (V[0, 0] * (V[1, 1] * V[2, 2] - V[2, 1] * V[1, 2])
           - V[0, 1] * (V[1, 0] * V[2, 2] - V[2, 0] * V[1, 2])
           + V[0, 2] * (V[1, 0] * V[2, 1] - V[2, 0] * V[1, 1]))
    if det < 0.0:
        for k in range(3):
            V[k, 2] = -V[k, 2]


@numba.njit(cache=True)
def _orthonormal_to(u, out):
    # any unit vector orthogonal to unit u
    if abs(u[0]) < 0.6:
        e0, e1, e2 = 1.0, 0.0, 0.0
    elif abs(u[1]) < 0.6:
        e0, e1, e2 = 0.0, 1.0, 0.0
    else:
        e0, e1, e2 = 0.0, 0.0, 1.0
    d = u[0] * e0 + u[1] * e1 + u[2] * e2
    out[0] = e0 - d * u[0]
    out[1] = e1 - d * u[1]
    out[2] = e2 - d * u[2]
    n = np.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2)
    for k in range(3):
        out[k] /= n


@numba.njit(cache=True)
def _svd3(F, U, s, V):
    """Rotation-variant SVD: U, V rotations, the sign of det F carried by s[2]."""
    A = np.empty((3, 3))
    FV = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            A[i, j] = F[0, i] * F[0, j] + F[1, i] * F[1, j] + F[2, i] * F[2, j]
    w = np.empty(3)
    _sym_eig3(A, w, V)
    for i in range(3):
        for j in range(3):
            FV[i, j] = F[i, 0] * V[0, j] + F[i, 1] * V[1, j] + F[i, 2] * V[2, j]
    u = np.empty(3)
    n0 = np.sqrt(FV[0, 0] ** 2 + FV[1, 0] ** 2 + FV[2, 0] ** 2)
    if n0 > 0.0:
        for k in range(3):
            U[k, 0] = FV[k, 0] / n0
    else:
        U[0, 0], U[1, 0], U[2, 0] = 1.0, 0.0, 0.0
    d = U[0, 0] * FV[0, 1] + U[1, 0] * FV[1, 1] + U[2, 0] * FV[2, 1]
    for k in range(3):
        u[k] = FV[k, 1] - d * U[k, 0]
    n1 = np.sqrt(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)
    if n1 > 1e-14 * max(n0, 1e-300):
        for k in range(3):
            U[k, 1] = u[k] / n1
    else:
        _orthonormal_to(U[:, 0], u)
        for k in range(3):
            U[k, 1] = u[k]
    U[0, 2] = U[1, 0] * U[2, 1] - U[2, 0] * U[1, 1]
    U[1, 2] = U[2, 0] * U[0, 1] - U[0, 0] * U[2, 1]
    U[2, 2] = U[0, 0] * U[1, 1] - U[1, 0] * U[0, 1]
    for j in range(3):
        s[j] = U[0, j] * FV[0, j] + U[1, j] * FV[1, j] + U[2, j] * FV[2, j]


@numba.njit(cache=True)
def _psi_scalar(model, mu, lam, I1, I2, I3):
    if model == 0:
        lj = np.log(I3)
        return 0.5 * mu * (I2 - 3.0) - mu * lj + 0.5 * lam * lj * lj
    if model == 1:
        r = I3 - 1.0 - mu / lam
        return 0.5 * mu * (I2 - 3.0) + 0.5 * lam * r * r
    if model == 2:
        return 0.5 * mu * (I2 - 2.0 * I1 + 3.0)
    return mu * (I2 - 2.0 * I1 + 3.0) + 0.5 * lam * (I3 - 1.0) ** 2


@numba.njit(cache=True)
def _psi_derivs(model, mu, lam, I3, out):
    # (d1, d2, d3, dd1, dd2, dd3); none of the models depend on I1 or I2 beyond first order
    for k in range(6):
        out[k] = 0.0
    if model == 0:
        lj = np.log(I3)
        out[1] = 0.5 * mu
        out[2] = (lam * lj - mu) / I3
        out[5] = (mu + lam - lam * lj) / (I3 * I3)
    elif model == 1:
        out[1] = 0.5 * mu
        out[2] = lam * (I3 - 1.0) - mu
        out[5] = lam
    elif model == 2:
        out[0] = -mu
        out[1] = 0.5 * mu
    else:
        out[0] = -2.0 * mu
        out[1] = mu
        out[2] = lam * (I3 - 1.0)
        out[5] = lam


@numba.njit(cache=True)
def _cof(F, C):
    for j in range(3):
        a = (j + 1) % 3
        b = (j + 2) % 3
        C[0, j] = F[1, a] * F[2, b] - F[2, a] * F[1, b]
        C[1, j] = F[2, a] * F[0, b] - F[0, a] * F[2, b]
        C[2, j] = F[0, a] * F[1, b] - F[1, a] * F[0, b]


# twist mode k rotates the (i, j) plane; lambda_k = 2 / (s_i + s_j)
_TW_I = np.array([1, 0, 0])
_TW_J = np.array([2, 2, 1])


@numba.njit(cache=True)
def _elastic_pass(x, tets, B, vol, mu, lam, model, floor,
                  Fo, Uo, so, Vo, do, psi_o, grad_o, diag_o):
    n = tets.shape[0]
    F = np.empty((3, 3))
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    s = np.empty(3)
    d = np.empty(6)
    C = np.empty((3, 3))
    R = np.empty((3, 3))
    P = np.empty((3, 3))
    bad = -1
    tw_i = _TW_I
    tw_j = _TW_J
    for e in range(n):
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for v in range(4):
                    acc += x[tets[e, v], i] * B[e, v, j]
                F[i, j] = acc
        _svd3(F, U, s, V)
        _cof(F, C)
        I3 = F[0, 0] * C[0, 0] + F[1, 0] * C[1, 0] + F[2, 0] * C[2, 0]
        I1 = s[0] + s[1] + s[2]
        I2 = 0.0
        for i in range(3):
            for j in range(3):
                I2 += F[i, j] * F[i, j]
                R[i, j] = U[i, 0] * V[j, 0] + U[i, 1] * V[j, 1] + U[i, 2] * V[j, 2]
        if model == 0 and not I3 > 0.0:
            if bad < 0:
                bad = e
            psi_o[e] = np.nan
            continue
        _psi_derivs(model, mu[e], lam[e], I3, d)
        psi_o[e] = _psi_scalar(model, mu[e], lam[e], I1, I2, I3)
        for i in range(3):
            so[e, i] = s[i]
            for j in range(3):
                Fo[e, i, j] = F[i, j]
                Uo[e, i, j] = U[i, j]
                Vo[e, i, j] = V[i, j]
                P[i, j] = d[0] * R[i, j] + 2.0 * d[1] * F[i, j] + d[2] * C[i, j]
        for k in range(6):
            do[e, k] = d[k]
        lam_t0 = 2.0 / max(s[tw_i[0]] + s[tw_j[0]], floor)
        lam_t1 = 2.0 / max(s[tw_i[1]] + s[tw_j[1]], floor)
        lam_t2 = 2.0 / max(s[tw_i[2]] + s[tw_j[2]], floor)
        w = vol[e]
        for v in range(4):
            b0 = B[e, v, 0]
            b1 = B[e, v, 1]
            b2 = B[e, v, 2]
            bb = b0 * b0 + b1 * b1 + b2 * b2
            # V^T b, used by the twist projections
            vb0 = V[0, 0] * b0 + V[1, 0] * b1 + V[2, 0] * b2
            vb1 = V[0, 1] * b0 + V[1, 1] * b1 + V[2, 1] * b2
            vb2 = V[0, 2] * b0 + V[1, 2] * b1 + V[2, 2] * b2
            for i in range(3):
                grad_o[e, v, i] = w * (P[i, 0] * b0 + P[i, 1] * b1 + P[i, 2] * b2)
                rb = R[i, 0] * b0 + R[i, 1] * b1 + R[i, 2] * b2
                fb = F[i, 0] * b0 + F[i, 1] * b1 + F[i, 2] * b2
                cb = C[i, 0] * b0 + C[i, 1] * b1 + C[i, 2] * b2
                acc = d[3] * rb * rb + d[4] * 4.0 * fb * fb + d[5] * cb * cb + 2.0 * d[1] * bb
                # (Q_k b)_i with Q_k = U T_k V^T / sqrt(2); T_k maps e_b -> e_a, e_a -> -e_b
                q0 = (U[i, 1] * vb2 - U[i, 2] * vb1) * 0.7071067811865476
                q1 = (U[i, 0] * vb2 - U[i, 2] * vb0) * 0.7071067811865476
                q2 = (U[i, 0] * vb1 - U[i, 1] * vb0) * 0.7071067811865476
                acc += d[0] * (lam_t0 * q0 * q0 + lam_t1 * q1 * q1 + lam_t2 * q2 * q2)
                diag_o[e, v, i] = w * acc
    return bad


@numba.njit(cache=True)
def _elastic_qf(p, tets, B, vol, Fs, Us, ss, Vs, ds, sel, floor, out):
    W = np.empty((3, 3))
    C = np.empty((3, 3))
    C2 = np.empty((3, 3))
    M = np.empty((3, 3))
    for k in range(sel.shape[0]):
        e = sel[k]
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for v in range(4):
                    acc += p[tets[e, v], i] * B[e, v, j]
                W[i, j] = acc
        F = Fs[e]
        U = Us[e]
        V = Vs[e]
        s = ss[e]
        d = ds[e]
        _cof(F, C)
        rw = 0.0
        fw = 0.0
        cw = 0.0
        ww = 0.0
        for i in range(3):
            for j in range(3):
                r = U[i, 0] * V[j, 0] + U[i, 1] * V[j, 1] + U[i, 2] * V[j, 2]
                rw += r * W[i, j]
                fw += F[i, j] * W[i, j]
                cw += C[i, j] * W[i, j]
                ww += W[i, j] * W[i, j]
        # M = U^T W V, twist projections are its antisymmetric parts
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for a in range(3):
                    acc += W[i, a] * V[a, j]
                C2[i, j] = acc
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for a in range(3):
                    acc += U[a, i] * C2[a, j]
                M[i, j] = acc
        t0 = (M[1, 2] - M[2, 1]) * 0.7071067811865476
        t1 = (M[0, 2] - M[2, 0]) * 0.7071067811865476
        t2 = (M[0, 1] - M[1, 0]) * 0.7071067811865476
        l0 = 2.0 / max(s[1] + s[2], floor)
        l1 = 2.0 / max(s[0] + s[2], floor)
        l2 = 2.0 / max(s[0] + s[1], floor)
        # d^2/dt^2 det(F + tW) = 2 (det(w0,w1,f2) + det(w0,f1,w2) + det(f0,w1,w2))
        h6 = 0.0
        for a in range(3):
            b = (a + 1) % 3
            c = (a + 2) % 3
            h6 += W[a, 0] * (W[b, 1] * F[c, 2] - W[c, 1] * F[b, 2])
            h6 += W[a, 0] * (F[b, 1] * W[c, 2] - F[c, 1] * W[b, 2])
            h6 += F[a, 0] * (W[b, 1] * W[c, 2] - W[c, 1] * W[b, 2])
        val = d[3] * rw * rw + d[4] * 4.0 * fw * fw + d[5] * cw * cw
        val += d[0] * (l0 * t0 * t0 + l1 * t1 * t1 + l2 * t2 * t2)
        val += 2.0 * d[1] * ww + 2.0 * d[2] * h6
        out[k] = vol[e] * val


class ElementBatch:
    """Kernel state for a group of tets sharing one material model.

    Built once per configuration x; energy, gradient and Hessian diagonal come
    out of a single pass and the cached SVD is reused by the quadratic forms.
    """

    def __init__(self, mesh: TetMesh, x: np.ndarray, material: MaterialModel, tets=None,
                 mu=None, lam=None):
        self.material = material
        self.index = np.arange(mesh.n_tets) if tets is None else np.asarray(tets, dtype=np.int64)
        self.tets = np.ascontiguousarray(mesh.tets[self.index])
        self.B = np.ascontiguousarray(mesh.grad_op[self.index], dtype=np.float64)
        self.volume = np.ascontiguousarray(mesh.rest_volume[self.index], dtype=np.float64)
        n = len(self.index)
        self._mu = np.broadcast_to(np.asarray(material.mu if mu is None else mu, np.float64), (n,)).copy()
        self._lam = np.broadcast_to(np.asarray(material.lam if lam is None else lam, np.float64), (n,)).copy()
        self.F = np.zeros((n, 3, 3))
        self.U = np.zeros((n, 3, 3))
        self.V = np.zeros((n, 3, 3))
        self.sigma = np.zeros((n, 3))
        self.d = np.zeros((n, 6))
        self._psi = np.empty(n)
        self._grad = np.empty((n, 4, 3))
        self._diag = np.empty((n, 4, 3))
        xd = np.ascontiguousarray(x, dtype=np.float64)
        bad = _elastic_pass(xd, self.tets, self.B, self.volume, self._mu, self._lam,
                            _MODEL_ID[material.model], TWIST_DENOM_FLOOR, self.F, self.U,
                            self.sigma, self.V, self.d, self._psi, self._grad, self._diag)
        if bad >= 0:
            I3 = det3(np.einsum("nvi,nvj->nij", xd[self.tets], self.B))
            raise InvertedElementError(self.index[np.flatnonzero(~(I3 > 0))])
        self._dtype = np.asarray(x).dtype

    @property
    def I3(self) -> np.ndarray:
        return det3(self.F)

    @property
    def R(self) -> np.ndarray:
        return self.U @ np.swapaxes(self.V, 1, 2)

    @property
    def twist(self):
        return twist_modes(self.U, self.sigma, self.V)

    def energy_density(self) -> np.ndarray:
        return self._psi

    def energy(self) -> float:
        return float(np.dot(self.volume, self._psi))

    def stress(self) -> np.ndarray:
        """dPsi/dF as 3x3 matrices."""
        d1, d2, d3 = self.d[:, 0], self.d[:, 1], self.d[:, 2]
        return (d1[:, None, None] * self.R + (2.0 * d2)[:, None, None] * self.F
                + d3[:, None, None] * cofactor(self.F))

    def gradient(self) -> np.ndarray:
        """(n, 4, 3) per-vertex gradients of V * Psi."""
        return self._grad.astype(self._dtype, copy=False)

    def diag_hessian(self) -> np.ndarray:
        """(n, 4, 3) diagonal of V * d2Psi/dx2 (the H3 term has a zero diagonal)."""
        return self._diag.astype(self._dtype, copy=False)

    def direction_gradient(self, p: np.ndarray) -> np.ndarray:
        """W = dFdx p as 3x3 matrices, for per-tet stacked directions p (n, 4, 3)."""
        return np.einsum("nvi,nvj->nij", p, self.B)

    def local_quadratic_forms(self, p_global: np.ndarray, sel=None) -> np.ndarray:
        """Per-tet V * p^T (d2Psi/dx2) p for a global (n_vertices, 3) direction."""
        sel = np.arange(len(self.index)) if sel is None else np.asarray(sel, dtype=np.int64)
        out = np.empty(len(sel))
        _elastic_qf(np.ascontiguousarray(p_global, dtype=np.float64), self.tets, self.B,
                    self.volume, self.F, self.U, self.sigma, self.V, self.d, sel,
                    TWIST_DENOM_FLOOR, out)
        return out

    def quadratic_form(self, p: np.ndarray, sel=None) -> np.ndarray:
        """(n,) values for per-tet stacked directions p (n, 4, 3)."""
        sel = np.arange(len(self.index)) if sel is None else np.asarray(sel, dtype=np.int64)
        p = np.asarray(p, dtype=np.float64).reshape(len(sel), 4, 3)
        # give every selected tet private vertex slots
        tets = np.arange(4 * len(sel)).reshape(-1, 4)
        out = np.empty(len(sel))
        _elastic_qf(np.ascontiguousarray(p.reshape(-1, 3)), tets, self.B[sel], self.volume[sel],
                    self.F[sel], self.U[sel], self.sigma[sel], self.V[sel], self.d[sel],
                    np.arange(len(sel)), TWIST_DENOM_FLOOR, out)
        return out


def det_second_variation(F: np.ndarray, W: np.ndarray) -> np.ndarray:
    """vec(W)^T H3 vec(W) = d2/dt2 det(F + tW) at t = 0."""
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    w0, w1, w2 = W[..., :, 0], W[..., :, 1], W[..., :, 2]

    def tri(a, b, c):
        return np.einsum("...i,...i->...", a, np.cross(b, c))

    return 2.0 * (tri(w0, w1, f2) + tri(w0, f1, w2) + tri(f0, w1, w2))


# ---------------------------------------------------------------------------
# single-element entry points


def _single(mesh, x, tet, material) -> ElementBatch:
    return ElementBatch(mesh, x, material, np.array([tet]))


def element_energy(mesh: TetMesh, x, tet: int, material: MaterialModel) -> float:
    return _single(mesh, x, tet, material).energy()


def element_gradient(mesh: TetMesh, x, tet: int, material: MaterialModel) -> np.ndarray:
    return _single(mesh, x, tet, material).gradient()[0].ravel()


def element_diag_hessian(mesh: TetMesh, x, tet: int, material: MaterialModel) -> np.ndarray:
    return _single(mesh, x, tet, material).diag_hessian()[0].ravel()


def element_quadratic_form(mesh: TetMesh, x, tet: int, material: MaterialModel, p) -> float:
    p = np.asarray(p, dtype=np.float64).reshape(1, 4, 3)
    return float(_single(mesh, x, tet, material).quadratic_form(p)[0])


__all__ = [
    "Model", "MaterialModel", "InvariantState", "InvertedElementError", "ElementBatch",
    "svd_polar", "psi", "psi_derivatives", "invariant_gradients", "twist_modes",
    "element_energy", "element_gradient", "element_diag_hessian", "element_quadratic_form",
    "deformation_gradients",
]
