"""Jacobi-preconditioned nonlinear CG for the incremental potential.

Each iteration: rebuild the contact set, assemble gradient and Hessian
diagonal, form the search direction (Dai-Kou by default), pick the step from
the quadratic model, capped so that no vertex moves more than d_hat / 2.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .contact import (
    ConstraintSet, ExclusionTable, HalfSpace, PlaneConstraintSet, compute_constraint_set,
    default_cell_size, ground_contact_constraints,
)
from .elasticity import ElementBatch, InvertedElementError, MaterialModel, det3
from .mesh import TetMesh

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class BetaVariant(str, enum.Enum):
    DK = "dk"
    FR = "fr"
    PRP = "prp"


class Splitting(str, enum.Enum):
    OFF = "off"
    PER_OBJECT = "per_object"
    COLLISION_PARTITION = "collision_partition"

    @classmethod
    def parse(cls, s) -> "Splitting":
        if isinstance(s, cls):
            return s
        key = str(s).lower().replace("-", "_")
        aliases = {"object": cls.PER_OBJECT, "perobject": cls.PER_OBJECT,
                   "collision": cls.COLLISION_PARTITION, "partition": cls.COLLISION_PARTITION}
        return aliases.get(key.replace("_", ""), None) or cls(key)


@dataclass
class SolverConfig:
    h: float = 0.01
    d_hat: float | None = None
    kappa: float = 1.0
    epsilon: float = 1e-3
    iter_max: int = 100
    beta_variant: BetaVariant = BetaVariant.DK
    splitting: Splitting = Splitting.OFF
    # negative/tiny curvature test: p^T H p <= curvature_floor * p^T M p
    curvature_floor: float = 1e-8
    # Jacobi diagonal clamp, relative to the vertex mass
    precond_floor: float = 1e-2
    # drop the (negative) tangential barrier curvature from the preconditioner
    project_contact_diag: bool = True
    max_domain_halvings: int = 30
    check_exclusion: bool = False

    def __post_init__(self):
        self.beta_variant = BetaVariant(str(getattr(self.beta_variant, "value", self.beta_variant)).lower())
        self.splitting = Splitting.parse(self.splitting)
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if self.iter_max < 1:
            raise ValueError("iter_max must be >= 1")
        if not self.curvature_floor > 0 or not self.precond_floor > 0:
            raise ValueError("floors must be positive")
        if self.d_hat is not None and not self.d_hat > 0:
            raise ValueError("d_hat must be positive")


# ---------------------------------------------------------------------------
# problem definition


@dataclass
class MaterialGroup:
    material: MaterialModel
    tets: np.ndarray


class ContactModel:
    """Mesh self/inter-object contact plus analytic half-spaces."""

    def __init__(self, mesh: TetMesh, d_hat: float, kappa: float,
                 exclusion: ExclusionTable | None = None, half_spaces=(), cell_size=None):
        self.mesh = mesh
        self.d_hat = float(d_hat)
        self.kappa = float(kappa)
        self.exclusion = exclusion if exclusion is not None else ExclusionTable.empty(mesh)
        self.half_spaces = list(half_spaces)
        self.cell_size = cell_size or default_cell_size(mesh, d_hat)
        self.enabled = True

    def constraints(self, x):
        if not self.enabled:
            return []
        sets = [compute_constraint_set(self.mesh, x, self.d_hat, self.kappa, self.exclusion, self.cell_size)]
        if self.half_spaces:
            sets.append(ground_contact_constraints(
                x, self.half_spaces, self.d_hat, self.kappa, self.mesh.surface_vertices))
        return sets


class IncrementalPotential:
    """E(x) = 1/2 |x - x_tilde|_M^2 + h^2 sum V Psi + kappa sum b(d)."""

    def __init__(self, mesh: TetMesh, groups, x_tilde, h, contact: ContactModel | None = None,
                 free=None):
        self.mesh = mesh
        self.groups = [g if isinstance(g, MaterialGroup) else MaterialGroup(*g) for g in groups]
        self.x_tilde = np.asarray(x_tilde)
        self.h = float(h)
        self.contact = contact
        n = mesh.n_vertices
        self.free = np.ones(n, bool) if free is None else np.asarray(free, bool)
        self.mass = mesh.mass.astype(self.x_tilde.dtype)

    @classmethod
    def single(cls, mesh, material, x_tilde, h, contact=None, free=None):
        return cls(mesh, [MaterialGroup(material, np.arange(mesh.n_tets))], x_tilde, h, contact, free)

    def inverted_vertices(self, x) -> np.ndarray:
        """Vertices of inverted tets whose material needs det F > 0."""
        bad = np.zeros(self.mesh.n_vertices, bool)
        for g in self.groups:
            if g.material.needs_positive_det:
                F = np.einsum("nvi,nvj->nij", x[self.mesh.tets[g.tets]], self.mesh.grad_op[g.tets])
                bad[self.mesh.tets[g.tets[det3(F) <= 0]].ravel()] = True
        return bad

    def feasible(self, x) -> bool:
        return not self.inverted_vertices(x).any()

    def evaluate(self, x, project_contact: bool = False) -> "Evaluation":
        return Evaluation(self, x, project_contact)

    def energy(self, x) -> float:
        return self.evaluate(x).energy


class Evaluation:
    """Everything the solver needs at one configuration x."""

    def __init__(self, problem: IncrementalPotential, x, project_contact: bool = False):
        self.problem = problem
        self.x = x
        mesh = problem.mesh
        n = mesh.n_vertices
        h2 = problem.h**2
        self.constraint_sets = problem.contact.constraints(x) if problem.contact else []
        self.batches = [ElementBatch(mesh, x, g.material, g.tets) for g in problem.groups]
        self.n_constraints = sum(len(c) for c in self.constraint_sets)

        m = problem.mass[:, None]
        dx = x - problem.x_tilde
        g = m * dx
        diag = np.repeat(m, 3, axis=1)
        for b in self.batches:
            g += h2 * _scatter_tets(b.tets, b.gradient(), n)
            diag += h2 * _scatter_tets(b.tets, b.diag_hessian(), n)
        for cs in self.constraint_sets:
            if len(cs):
                g += cs.gradient(n, x)
                diag += cs.diag_hessian(n, x, projected=project_contact)
        self.gradient = g
        self.diag = diag
        self._dx = dx

    @property
    def energy(self) -> float:
        p = self.problem
        e = 0.5 * float(np.sum(p.mass[:, None] * self._dx**2))
        e += p.h**2 * sum(b.energy() for b in self.batches)
        e += sum(cs.energy(self.x) for cs in self.constraint_sets)
        return e

    def element_lists(self):
        """(vertex index arrays, local quadratic-form callables) for each term."""
        out = []
        h2 = self.problem.h**2
        for b in self.batches:
            out.append((b.tets, lambda p, sel, b=b: h2 * b.local_quadratic_forms(p, sel)))
        for cs in self.constraint_sets:
            if len(cs):
                out.append((cs.verts, lambda p, sel, cs=cs: cs.local_quadratic_forms(p, self.x, sel)))
        return out

    def quadratic_form(self, p) -> float:
        """p^T H p for the whole system."""
        q = float(np.sum(self.problem.mass[:, None] * p * p))
        for _, fn in self.element_lists():
            q += float(np.sum(fn(p, None)))
        return q

    def region_quadratic_forms(self, p, labels, n_regions) -> np.ndarray:
        """p_r^T H p_r for p restricted to each region."""
        q = np.bincount(labels, weights=np.sum(self.problem.mass[:, None] * p * p, axis=1),
                        minlength=n_regions)
        for verts, fn in self.element_lists():
            if len(verts) == 0:
                continue
            lab = labels[verts]
            pure = np.all(lab == lab[:, :1], axis=1)
            if n_regions == 1 or pure.all():
                q += np.bincount(lab[:, 0], weights=fn(p, None), minlength=n_regions)
                continue
            idx = np.flatnonzero(pure)
            q += np.bincount(lab[idx, 0], weights=fn(p, idx), minlength=n_regions)
            mixed = np.flatnonzero(~pure)
            for r in np.unique(lab[mixed]):
                sel = mixed[np.any(lab[mixed] == r, axis=1)]
                q[r] += float(np.sum(fn(p * (labels == r)[:, None], sel)))
        return q


def _scatter_tets(tets, local, n):
    out = np.empty((n, 3), dtype=local.dtype)
    idx = tets.ravel()
    vals = local.reshape(-1, 3)
    for ax in range(3):
        out[:, ax] = np.bincount(idx, weights=vals[:, ax], minlength=n)
    return out


# ---------------------------------------------------------------------------
# conjugacy and step size


def _region_dot(a, b, labels, n_regions):
    return np.bincount(labels, weights=np.sum(a * b, axis=1), minlength=n_regions)


def assemble_gradient_and_preconditioner(problem: IncrementalPotential, x, config: SolverConfig):
    """(evaluation, g, P_diag) with fixed rows of g zeroed."""
    ev = problem.evaluate(x, config.project_contact_diag)
    g = ev.gradient.copy()
    g[~problem.free] = 0.0
    floor = config.precond_floor * problem.mass[:, None]
    P = 1.0 / np.maximum(ev.diag, floor)
    return ev, g, P


def beta_dk(g_next, g, p, P_diag):
    """Preconditioned Dai-Kou beta; 0 (restart) on degenerate input."""
    return _beta(BetaVariant.DK, g_next, g, p, P_diag)


def beta_baseline(variant, g_next, g, p, P_diag):
    return _beta(BetaVariant(variant), g_next, g, p, P_diag)


def _beta(variant, g_next, g, p, P_diag, labels=None, n_regions=1):
    g_next, g, p, P_diag = (np.asarray(a, dtype=np.float64).reshape(len(np.asarray(g_next)), -1)
                            for a in (g_next, g, p, P_diag))
    if labels is None:
        labels = np.zeros(len(g_next), np.int64)
    y = g_next - g
    Py = P_diag * y
    if variant is BetaVariant.DK:
        gPy = _region_dot(g_next, Py, labels, n_regions)
        yPy = _region_dot(y, Py, labels, n_regions)
        yp = _region_dot(y, p, labels, n_regions)
        pg = _region_dot(p, g_next, labels, n_regions)
        yy = _region_dot(y, y, labels, n_regions)
        pp = _region_dot(p, p, labels, n_regions)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = gPy / yp - (yPy / yp) * (pg / yp)
        bad = np.abs(yp) < 1e-30 * np.sqrt(yy * pp)
    else:
        gPg = _region_dot(g, P_diag * g, labels, n_regions)
        if variant is BetaVariant.FR:
            num = _region_dot(g_next, P_diag * g_next, labels, n_regions)
        else:
            num = _region_dot(g_next, Py, labels, n_regions)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = num / gPg
        bad = gPg <= 0
        if variant is BetaVariant.PRP:
            beta = np.maximum(beta, 0.0)
    beta = np.where(bad | ~np.isfinite(beta), 0.0, beta)
    return float(beta[0]) if n_regions == 1 and labels is not None and beta.size == 1 else beta


@dataclass
class StepChoice:
    alpha: float
    dE: float
    capped: bool
    restart: bool
    zero: bool = False


def line_search_alpha(gp: float, quad: float, p_inf: float, d_hat: float, config: SolverConfig,
                      pMp: float | None = None) -> StepChoice:
    """Newton step on the quadratic model along p, capped at d_hat / (2 |p|_inf)."""
    if p_inf == 0.0:
        return StepChoice(0.0, 0.0, False, False, zero=True)
    alpha_upper = d_hat / (2.0 * p_inf)
    scale = pMp if pMp is not None else 1.0
    if quad <= config.curvature_floor * scale or gp >= 0.0:
        alpha = 0.5 * alpha_upper
        return StepChoice(alpha, -alpha * gp - 0.5 * alpha**2 * quad, True, True)
    alpha_bar = -gp / quad
    capped = alpha_upper < alpha_bar
    alpha = alpha_upper if capped else alpha_bar
    return StepChoice(alpha, -alpha * gp - 0.5 * alpha**2 * quad, capped, False)


# ---------------------------------------------------------------------------
# main loop


@dataclass
class IterationLog:
    iter: int
    dE: float
    alpha: float
    grad_inf: float
    n_constraints: int
    capped: bool
    step_inf: float
    energy: float
    alphas: tuple = ()
    restart: tuple = ()


CSV_COLUMNS = ["iter", "dE", "alpha", "grad_inf", "n_constraints", "capped", "step_inf", "energy"]


@dataclass
class ConvergenceRecord:
    rows: list = field(default_factory=list)
    dE0: float = float("nan")
    E0: float = float("nan")
    reason: str = ""
    epsilon: float = float("nan")
    d_hat: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def converged(self) -> bool:
        return self.reason in ("converged", "dE0_floor", "zero_direction")

    def csv_rows(self):
        for r in self.rows:
            yield [r.iter, repr(float(r.dE)), repr(float(r.alpha)), repr(float(r.grad_inf)),
                   int(r.n_constraints), int(r.capped), repr(float(r.step_inf)), repr(float(r.energy))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(self.csv_rows())
        return buf.getvalue()


def region_labels(problem: IncrementalPotential, x, config: SolverConfig, ev: Evaluation | None = None):
    mesh = problem.mesh
    n = mesh.n_vertices
    if config.splitting is Splitting.OFF:
        return np.zeros(n, np.int64), 1
    if config.splitting is Splitting.PER_OBJECT:
        return mesh.vertex_object.astype(np.int64), mesh.n_objects
    ev = ev or problem.evaluate(x)
    hit = np.zeros(n, bool)
    for cs in ev.constraint_sets:
        if len(cs):
            hit[np.asarray(cs.verts).ravel()] = True
    touched = hit[mesh.tets].any(axis=1)
    hit[mesh.tets[touched].ravel()] = True
    return hit.astype(np.int64), 2


def pncg_solve(problem: IncrementalPotential, x0, config: SolverConfig, d_hat: float | None = None):
    """Minimise the incremental potential from x0; returns (x, ConvergenceRecord)."""
    d_hat = d_hat if d_hat is not None else (
        config.d_hat if config.d_hat is not None else problem.contact.d_hat)
    x = np.array(x0, copy=True)
    free = problem.free
    rec = ConvergenceRecord(epsilon=config.epsilon, d_hat=d_hat)
    labels = n_regions = None
    g_prev = p_prev = None
    restart = None

    for k in range(config.iter_max):
        ev, g, P = assemble_gradient_and_preconditioner(problem, x, config)
        if not np.all(np.isfinite(g)):
            raise SolverError(f"non-finite gradient at iteration {k}")
        if config.check_exclusion:
            _check_exclusion(problem, ev)
        if labels is None:
            labels, n_regions = region_labels(problem, x, config, ev)
            restart = np.ones(n_regions, bool)

        if k == 0:
            beta = np.zeros(n_regions)
        else:
            beta = np.atleast_1d(_beta(config.beta_variant, g, g_prev, p_prev, P, labels, n_regions))
            beta = np.where(restart, 0.0, beta)
        p = -P * g
        if k > 0:
            p += beta[labels][:, None] * p_prev
        p[~free] = 0.0

        gp = _region_dot(g, p, labels, n_regions)
        ascent = gp >= 0
        if np.any(ascent & (np.abs(gp) > 0)):
            # not a descent direction: fall back to preconditioned steepest descent there
            sd = ascent[labels]
            p[sd] = -(P * g)[sd]
            p[~free] = 0.0
            gp = _region_dot(g, p, labels, n_regions)

        p_abs = np.abs(p).max(axis=1)
        p_inf = np.zeros(n_regions)
        np.maximum.at(p_inf, labels, p_abs)
        pMp = _region_dot(problem.mass[:, None] * p, p, labels, n_regions)
        # same reduction order whatever the region count, so a body's step does not
        # depend on what else is in the scene
        quad = ev.region_quadratic_forms(p, labels, n_regions)
        if not (np.all(np.isfinite(quad)) and np.all(np.isfinite(gp))):
            raise SolverError(f"non-finite reduction at iteration {k}")

        steps = [line_search_alpha(float(gp[r]), float(quad[r]), float(p_inf[r]), d_hat, config,
                                   float(pMp[r])) for r in range(n_regions)]
        alphas = np.array([s.alpha for s in steps])
        restart = np.array([s.restart for s in steps]) | ascent
        dE = float(sum(s.dE for s in steps))
        energy = ev.energy
        if k == 0:
            rec.E0 = energy

        if all(s.zero for s in steps):
            rec.rows.append(IterationLog(k, 0.0, 0.0, _inf(g), ev.n_constraints, False, 0.0, energy,
                                         tuple(alphas), tuple(restart)))
            rec.reason = "zero_direction"
            if k == 0:
                rec.dE0 = 0.0
            return x, rec

        if k == 0 and dE <= 1e-14 * (1.0 + abs(energy)):
            rec.dE0 = dE
            rec.rows.append(IterationLog(k, dE, 0.0, _inf(g), ev.n_constraints, False, 0.0, energy,
                                         tuple(np.zeros(n_regions)), tuple(restart)))
            rec.reason = "dE0_floor"
            return x, rec

        x_new = (x + alphas[labels][:, None] * p).astype(x.dtype, copy=False)
        halvings = 0
        while True:
            bad = problem.inverted_vertices(x_new)
            if not bad.any():
                break
            halvings += 1
            if halvings > config.max_domain_halvings:
                raise SolverError(f"could not keep elements un-inverted at iteration {k}")
            # only the regions holding an inverted element back off
            hit = np.zeros(n_regions, bool)
            hit[labels[bad]] = True
            alphas[hit] *= 0.5
            restart |= hit
            x_new = (x + alphas[labels][:, None] * p).astype(x.dtype, copy=False)
        if halvings:
            dE = float(sum(-a * gp[r] - 0.5 * a * a * quad[r] for r, a in enumerate(alphas)))
        x = x_new

        step_inf = float(np.max(alphas * p_inf))
        rec.rows.append(IterationLog(
            k, dE, float(alphas.max()), _inf(g), ev.n_constraints, any(s.capped for s in steps),
            step_inf, energy, tuple(alphas), tuple(restart),
        ))
        if k == 0:
            rec.dE0 = dE
        elif dE < config.epsilon * rec.dE0:
            rec.reason = "converged"
            return x, rec
        g_prev, p_prev = g, p

    rec.reason = "iter_max"
    return x, rec


def _inf(a) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def _check_exclusion(problem, ev):
    contact = problem.contact
    if contact is None or len(contact.exclusion) == 0:
        return
    for cs in ev.constraint_sets:
        if isinstance(cs, ConstraintSet):
            for kind, verts in zip(cs.kind, cs.verts):
                if contact.exclusion.contains(kind, verts):
                    raise SolverError(f"excluded pair {tuple(verts)} entered the constraint set")


def split_directions(problem: IncrementalPotential, ev: Evaluation, g, p, labels, n_regions,
                     d_hat, config):
    """Per-region step sizes for direction p (independent line searches)."""
    gp = _region_dot(g, p, labels, n_regions)
    p_inf = np.zeros(n_regions)
    np.maximum.at(p_inf, labels, np.abs(p).max(axis=1))
    pMp = _region_dot(problem.mass[:, None] * p, p, labels, n_regions)
    quad = ev.region_quadratic_forms(p, labels, n_regions)
    out = np.zeros(n_regions)
    for r in range(n_regions):
        if p_inf[r] == 0:
            continue
        out[r] = line_search_alpha(float(gp[r]), float(quad[r]), float(p_inf[r]), d_hat, config,
                                   float(pMp[r])).alpha
    return out


__all__ = [
    "SolverConfig", "BetaVariant", "Splitting", "IncrementalPotential", "ContactModel",
    "MaterialGroup", "Evaluation", "ConvergenceRecord", "IterationLog", "SolverError",
    "assemble_gradient_and_preconditioner", "beta_dk", "beta_baseline", "line_search_alpha",
    "pncg_solve", "region_labels", "split_directions", "HalfSpace", "PlaneConstraintSet",
    "InvertedElementError",
]
