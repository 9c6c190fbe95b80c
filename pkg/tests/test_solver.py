import numpy as np
import pytest
from scipy.optimize import minimize

from pncg_ipc.contact import HalfSpace
from pncg_ipc.elasticity import ElementBatch, Model
from pncg_ipc.mesh import TetMesh, box_mesh, merge_meshes
from pncg_ipc.oracle import dense_barrier_hessian, dense_element_hessian, fd_gradient
from pncg_ipc.solver import (
    ContactModel, IncrementalPotential, MaterialGroup, Splitting, SolverConfig, SolverError,
    assemble_gradient_and_preconditioner, line_search_alpha, pncg_solve, region_labels,
    split_directions,
)

from conftest import material, rel_err


def stacked_blocks(gap=0.01):
    v, t = box_mesh((0.1, 0.1, 0.1), (2, 2, 2))
    a = TetMesh.from_arrays(v + [0, 0.01, 0], t)
    b = TetMesh.from_arrays(v + [0.02, 0.11 + gap, 0.01], t)
    return merge_meshes([a, b])


def contact_problem(mesh, x, mat=Model.STABLE_NEO_HOOKEAN, d_hat=0.02, kappa=0.5, free=None):
    ground = [HalfSpace([0, 0, 0], [0, 1, 0])]
    cm = ContactModel(mesh, d_hat, kappa, half_spaces=ground)
    x_tilde = x + [0, -0.002, 0]
    return IncrementalPotential.single(mesh, material(mat, 1e3, 2e3), x_tilde, 0.01, cm, free)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(h=0.0)
    with pytest.raises(ValueError):
        SolverConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        SolverConfig(iter_max=0)
    with pytest.raises(ValueError):
        SolverConfig(beta_variant="hz")
    assert SolverConfig(splitting="per-object").splitting is Splitting.PER_OBJECT


def test_inertia_only_is_solved_in_one_step(block):
    rng = np.random.default_rng(0)
    x0 = block.vertices_rest
    x_tilde = x0 + 0.05 * rng.normal(size=x0.shape)
    problem = IncrementalPotential(block, [], x_tilde, 0.01)
    x, rec = pncg_solve(problem, x0, SolverConfig(), d_hat=10.0)
    assert rec.rows[0].alpha == pytest.approx(1.0, rel=1e-12)
    assert not rec.rows[0].capped
    assert rec.reason == "converged" and rec.iterations == 2
    assert np.max(np.abs(x - x_tilde)) <= 1e-12


def test_total_gradient_matches_finite_differences():
    mesh = stacked_blocks(0.008)
    rng = np.random.default_rng(1)
    x = mesh.vertices_rest + 0.001 * rng.normal(size=mesh.vertices_rest.shape)
    problem = contact_problem(mesh, x)
    ev = problem.evaluate(x)
    assert ev.n_constraints > 0
    sets = ev.constraint_sets

    def energy(y):
        # the active set is frozen at x so that E is smooth around it
        e = 0.5 * float(np.sum(problem.mass[:, None] * (y - problem.x_tilde) ** 2))
        e += problem.h**2 * ElementBatch(mesh, y, problem.groups[0].material).energy()
        return e + sum(cs.energy(y) for cs in sets)

    assert rel_err(ev.gradient, fd_gradient(energy, x)) < 1e-5


def test_preconditioner_matches_dense_diagonal():
    mesh = stacked_blocks(0.008)
    rng = np.random.default_rng(2)
    x = mesh.vertices_rest + 0.001 * rng.normal(size=mesh.vertices_rest.shape)
    problem = contact_problem(mesh, x)
    cfg = SolverConfig(project_contact_diag=False)
    ev, _, P = assemble_gradient_and_preconditioner(problem, x, cfg)
    n = mesh.n_vertices
    H = np.diag(np.repeat(problem.mass, 3))
    mat = problem.groups[0].material
    for e in range(mesh.n_tets):
        idx = (3 * mesh.tets[e][:, None] + np.arange(3)).ravel()
        H[np.ix_(idx, idx)] += problem.h**2 * dense_element_hessian(mesh, x, e, mat)
    for cs in ev.constraint_sets:
        if len(cs) and hasattr(cs, "c"):
            H += dense_barrier_hessian(cs, n)
    ground = ev.constraint_sets[1]
    H[np.arange(3 * n), np.arange(3 * n)] += ground.diag_hessian(n, x).ravel()
    assert rel_err(ev.diag.ravel(), np.diag(H)) < 1e-10
    # tangential barrier curvature can make entries negative; P clamps them
    assert np.any(ev.diag < 0)
    np.testing.assert_array_equal(P, 1.0 / np.maximum(ev.diag, cfg.precond_floor * problem.mass[:, None]))
    p = rng.normal(size=x.shape)
    q_ground = ground.quadratic_form(p, x)
    assert ev.quadratic_form(p) == pytest.approx(p.ravel() @ H @ p.ravel() - (
        p.ravel() ** 2 * ground.diag_hessian(n, x).ravel()).sum() + q_ground, rel=1e-10)


def test_preconditioner_is_positive_and_finite():
    mesh = stacked_blocks(0.008)
    x = mesh.vertices_rest.copy()
    problem = contact_problem(mesh, x)
    for project in (True, False):
        _, _, P = assemble_gradient_and_preconditioner(problem, x, SolverConfig(project_contact_diag=project))
        assert np.all(np.isfinite(P)) and np.all(P > 0)


def test_fixed_vertices_never_move():
    mesh = stacked_blocks(0.02)
    x0 = mesh.vertices_rest.copy()
    free = np.ones(mesh.n_vertices, bool)
    free[::3] = False
    problem = contact_problem(mesh, x0, free=free)
    x, rec = pncg_solve(problem, x0, SolverConfig(iter_max=30))
    assert np.array_equal(x[~free], x0[~free])
    assert rec.iterations > 1


def test_single_tet_stretch_matches_reference_minimiser(unit_tet):
    x0 = unit_tet.vertices_rest.copy()
    x0[1, 0] *= 1.1
    mat = material(Model.NEO_HOOKEAN, 1e3, 1e3)
    free = np.array([False, True, True, True])
    problem = IncrementalPotential.single(unit_tet, mat, x0.copy(), 0.01, free=free)
    x, rec = pncg_solve(problem, x0, SolverConfig(epsilon=1e-12, iter_max=200), d_hat=1.0)
    g0 = np.abs(assemble_gradient_and_preconditioner(problem, x0, SolverConfig())[1]).max()
    g1 = np.abs(assemble_gradient_and_preconditioner(problem, x, SolverConfig())[1]).max()
    assert g1 < 1e-6 * g0
    assert rec.iterations <= 200

    def f(z):
        y = x0.copy()
        y[1:] = z.reshape(3, 3)
        return problem.energy(y)

    ref = minimize(f, x0[1:].ravel(), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(x[1:].ravel(), ref.x, atol=1e-6)


def test_cap_binds_on_large_displacement(block):
    x0 = block.vertices_rest
    problem = IncrementalPotential(block, [], x0 + [0.0, 1.0, 0.0], 0.01)
    d_hat = 0.01
    x, rec = pncg_solve(problem, x0, SolverConfig(iter_max=5), d_hat=d_hat)
    for r in rec.rows:
        assert r.capped and r.step_inf <= d_hat / 2 + 1e-12
    assert np.max(np.abs(x - x0)) <= 5 * d_hat / 2 + 1e-12


def test_negative_curvature_falls_back_and_restarts():
    cfg = SolverConfig()
    s = line_search_alpha(-1.0, -3.0, 2.0, 0.1, cfg)
    assert s.restart and s.capped and s.alpha == pytest.approx(0.5 * 0.1 / 4)
    s = line_search_alpha(1.0, 3.0, 2.0, 0.1, cfg)
    assert s.restart
    s = line_search_alpha(0.0, 1.0, 0.0, 0.1, cfg)
    assert s.zero and s.alpha == 0.0


def test_rest_state_hits_energy_floor(block):
    x0 = block.vertices_rest
    problem = IncrementalPotential.single(block, material(Model.FIXED_COROTATED), x0.copy(), 0.01)
    x, rec = pncg_solve(problem, x0, SolverConfig(), d_hat=0.01)
    assert rec.reason in ("dE0_floor", "zero_direction") and rec.iterations == 1
    assert np.array_equal(x, x0)


def test_converged_steps_satisfy_relative_test():
    mesh = stacked_blocks(0.004)
    x0 = mesh.vertices_rest
    problem = contact_problem(mesh, x0)
    cfg = SolverConfig(epsilon=1e-3, iter_max=200)
    x, rec = pncg_solve(problem, x0, cfg)
    assert rec.reason == "converged"
    assert rec.rows[-1].dE < cfg.epsilon * rec.dE0
    assert all(r.dE >= cfg.epsilon * rec.dE0 for r in rec.rows[1:-1])
    assert problem.energy(x) < rec.E0


def test_inverting_step_is_halved(unit_tet):
    x0 = unit_tet.vertices_rest.copy()
    x_tilde = x0.copy()
    x_tilde[3, 2] = -0.9  # inertia pulls the apex through the base
    problem = IncrementalPotential.single(unit_tet, material(Model.NEO_HOOKEAN, 1e-3, 1e-3), x_tilde, 0.01)
    x, rec = pncg_solve(problem, x0, SolverConfig(iter_max=20), d_hat=10.0)
    assert problem.feasible(x)
    assert rec.rows[0].alpha < 1.0


def test_per_object_alpha_ignores_other_body():
    # body 0 rests on the ground, body 1 floats; splitting keeps their steps apart
    v, t = box_mesh((0.1, 0.1, 0.1), (2, 2, 2))
    low = TetMesh.from_arrays(v + [0, 0.005, 0], t)
    high = TetMesh.from_arrays(v + [0.5, 1.0, 0], t)
    both = merge_meshes([low, high])
    mat = material(Model.FIXED_COROTATED, 1e3, 1e3)
    grav = np.array([0, -9.8e-4, 0])
    ground = [HalfSpace([0, 0, 0], [0, 1, 0])]
    cfg = SolverConfig(splitting="per_object", iter_max=15, epsilon=1e-6)

    two = IncrementalPotential.single(both, mat, both.vertices_rest + grav, 0.01,
                                      ContactModel(both, 0.02, 0.5, half_spaces=ground))
    solo = IncrementalPotential.single(high, mat, high.vertices_rest + grav, 0.01,
                                       ContactModel(high, 0.02, 0.5, half_spaces=ground))
    _, rec2 = pncg_solve(two, both.vertices_rest, cfg)
    _, rec1 = pncg_solve(solo, high.vertices_rest, cfg)
    n = min(rec1.iterations, rec2.iterations)
    assert n > 2
    a2 = [r.alphas[1] for r in rec2.rows[:n]]
    a1 = [r.alphas[0] for r in rec1.rows[:n]]
    np.testing.assert_allclose(a2, a1, rtol=1e-12)
    assert any(r.alphas[0] != r.alphas[1] for r in rec2.rows)


def test_off_equals_per_object_for_one_body(block):
    rng = np.random.default_rng(4)
    x0 = block.vertices_rest
    x_tilde = x0 + 1e-3 * rng.normal(size=x0.shape)
    problem = IncrementalPotential.single(block, material(Model.ARAP, 1e3, 1e3), x_tilde, 0.01)
    xa, ra = pncg_solve(problem, x0, SolverConfig(splitting="off"), d_hat=0.02)
    xb, rb = pncg_solve(problem, x0, SolverConfig(splitting="per_object"), d_hat=0.02)
    assert ra.iterations == rb.iterations
    np.testing.assert_allclose(xa, xb, rtol=0, atol=1e-14)


def test_collision_partition_labels():
    mesh = stacked_blocks(0.3)
    x = mesh.vertices_rest
    problem = contact_problem(mesh, x, d_hat=0.02)
    labels, n = region_labels(problem, x, SolverConfig(splitting="collision_partition"))
    assert n == 2
    # floor contacts plus their tets' vertices; the upper block is out of reach
    assert labels[x[:, 1] < 0.012].all()
    assert not labels[x[:, 1] > 0.065].any()
    assert not labels[mesh.vertex_object == 1].any()


def test_split_directions_skips_empty_regions(block):
    x0 = block.vertices_rest
    problem = IncrementalPotential(block, [], x0 + 0.001, 0.01)
    cfg = SolverConfig()
    ev, g, P = assemble_gradient_and_preconditioner(problem, x0, cfg)
    labels = np.zeros(block.n_vertices, np.int64)
    alphas = split_directions(problem, ev, g, -P * g, labels, 2, 1.0, cfg)
    assert alphas[0] == pytest.approx(1.0) and alphas[1] == 0.0


def test_nan_input_aborts(block):
    x0 = block.vertices_rest.copy()
    problem = IncrementalPotential(block, [], x0, 0.01)
    x0[0, 0] = np.nan
    with pytest.raises(SolverError):
        pncg_solve(problem, x0, SolverConfig(), d_hat=0.01)


def test_csv_log_has_stable_columns(block):
    x0 = block.vertices_rest
    problem = IncrementalPotential(block, [], x0 + 0.001, 0.01)
    _, rec = pncg_solve(problem, x0, SolverConfig(), d_hat=1.0)
    lines = rec.to_csv().splitlines()
    assert lines[0] == "iter,dE,alpha,grad_inf,n_constraints,capped,step_inf,energy"
    assert len(lines) == rec.iterations + 1
    assert float(lines[1].split(",")[1]) == rec.dE0
