"""Worked examples with frozen expected values."""
import numpy as np
import pytest

from pncg_ipc.contact import (
    ConstraintSet, Kind, barrier, barrier_derivatives, closest_point_edge_edge,
    closest_point_triangle,
)
from pncg_ipc.elasticity import (
    Model, element_diag_hessian, element_gradient, element_quadratic_form, invariant_gradients,
    psi, psi_derivatives, svd_polar, vec,
)
from pncg_ipc.mesh import compute_deformation_gradient
from pncg_ipc.solver import (
    BetaVariant, IncrementalPotential, MaterialGroup, SolverConfig,
    assemble_gradient_and_preconditioner, beta_baseline, beta_dk, line_search_alpha,
)

from conftest import material

I3x3 = np.eye(3)


def rot_z(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


# mesh


def test_unit_tet_rest_quantities(unit_tet):
    assert unit_tet.rest_volume[0] == pytest.approx(1 / 6, rel=1e-15)
    np.testing.assert_allclose(unit_tet.Dm_inv[0], I3x3, atol=1e-15)
    np.testing.assert_allclose(unit_tet.mass, 1000 / 6 / 4, rtol=1e-14)
    assert unit_tet.mass[0] == pytest.approx(41.6667, abs=1e-4)


def test_five_tet_cube_surface(cube5):
    assert cube5.n_tets == 5
    assert len(cube5.surface_faces) == 12
    assert len(cube5.surface_edges) == 18
    assert len(cube5.surface_vertices) == 8


def test_deformation_gradient_examples(unit_tet):
    x = unit_tet.vertices_rest
    np.testing.assert_allclose(compute_deformation_gradient(unit_tet, x, 0), I3x3, atol=1e-15)
    np.testing.assert_allclose(compute_deformation_gradient(unit_tet, 2 * x, 0), 2 * I3x3, atol=1e-15)
    R = rot_z(37.0)
    np.testing.assert_allclose(compute_deformation_gradient(unit_tet, x @ R.T, 0), R, atol=1e-15)


# elasticity


def test_svd_polar_identity():
    inv = svd_polar(I3x3)
    np.testing.assert_allclose(inv.sigma, 1.0)
    np.testing.assert_allclose(inv.R, I3x3, atol=1e-15)
    assert (inv.I1, inv.I2, inv.I3) == pytest.approx((3, 3, 1))


def test_svd_polar_diagonal():
    inv = svd_polar(np.diag([2.0, 1.0, 1.0]))
    assert (inv.I1, inv.I2, inv.I3) == pytest.approx((4, 6, 2))
    np.testing.assert_allclose(inv.R, I3x3, atol=1e-14)


def test_svd_polar_rotation():
    R = rot_z(90.0)
    inv = svd_polar(R)
    np.testing.assert_allclose(inv.R, R, atol=1e-14)
    np.testing.assert_allclose(inv.S, I3x3, atol=1e-14)
    assert inv.I1 == pytest.approx(3.0)
    assert inv.I3 == pytest.approx(1.0)


def test_nh_energy_examples():
    nh = material(Model.NEO_HOOKEAN, 1.0, 1.0)
    assert psi(nh, svd_polar(I3x3)) == pytest.approx(0.0, abs=1e-15)
    # 3/2 - ln 2 + (ln 2)^2 / 2
    assert psi(nh, svd_polar(np.diag([2.0, 1.0, 1.0]))) == pytest.approx(1.0470793263991554, rel=1e-14)


def test_arap_rotation_energy_is_zero():
    arap = material(Model.ARAP)
    assert psi(arap, svd_polar(rot_z(123.0))) == pytest.approx(0.0, abs=1e-14)


def test_nh_derivatives_at_rest():
    d = psi_derivatives(material(Model.NEO_HOOKEAN, 1.0, 1.0), svd_polar(I3x3))
    assert d == pytest.approx((0.0, 0.5, -1.0, 0.0, 0.0, 2.0))


def test_arap_derivatives():
    F = np.diag([1.3, 0.8, 1.1])
    d = psi_derivatives(material(Model.ARAP, 1.0, 0.0), svd_polar(F))
    assert d == pytest.approx((-1.0, 0.5, 0.0, 0.0, 0.0, 0.0))


def test_invariant_gradients_identity():
    g1, g2, g3 = invariant_gradients(svd_polar(I3x3))
    np.testing.assert_allclose(g1, vec(I3x3), atol=1e-15)
    np.testing.assert_allclose(g2, 2 * vec(I3x3))
    np.testing.assert_allclose(g3, vec(I3x3))


def test_invariant_gradient_g3_diagonal():
    _, _, g3 = invariant_gradients(svd_polar(np.diag([2.0, 1.0, 1.0])))
    np.testing.assert_allclose(g3, vec(np.diag([1.0, 2.0, 2.0])))


def test_element_gradient_zero_at_rest_and_translation(unit_tet):
    nh = material(Model.NEO_HOOKEAN)
    x = unit_tet.vertices_rest
    np.testing.assert_allclose(element_gradient(unit_tet, x, 0, nh), 0.0, atol=1e-14)
    np.testing.assert_allclose(element_gradient(unit_tet, x + [3.0, -1.0, 2.0], 0, nh), 0.0, atol=1e-13)


def test_element_diag_hessian_positive_at_rest(unit_tet):
    diag = element_diag_hessian(unit_tet, unit_tet.vertices_rest, 0, material(Model.NEO_HOOKEAN))
    assert np.all(diag > 0)


def test_element_quadratic_form_null_directions(unit_tet):
    x = unit_tet.vertices_rest @ np.diag([1.2, 0.9, 1.1])
    nh = material(Model.NEO_HOOKEAN)
    assert element_quadratic_form(unit_tet, x, 0, nh, np.tile([0.3, -0.2, 0.5], 4)) == pytest.approx(0, abs=1e-14)
    assert element_quadratic_form(unit_tet, x, 0, nh, np.zeros(12)) == 0.0


# contact


def test_barrier_values():
    assert barrier(1.0, 1.0) == 0.0
    assert barrier(2.0, 1.0) == 0.0
    assert barrier(0.5, 1.0) == pytest.approx(0.173287, abs=1e-6)
    assert barrier_derivatives(0.5, 1.0)[0] == pytest.approx(-1.193147, abs=1e-6)


def test_point_triangle_examples():
    T = [np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])]
    c, t, d = closest_point_triangle(np.array([0.0, 0, 1]), *T)
    assert d == pytest.approx(1.0)
    np.testing.assert_allclose(t, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(c, [1, -1, 0, 0], atol=1e-15)
    c, t, d = closest_point_triangle(np.array([0.25, 0.25, 0.5]), *T)
    assert d == pytest.approx(0.5)
    np.testing.assert_allclose(c, [1, -0.5, -0.25, -0.25], atol=1e-15)


def test_edge_edge_examples():
    c, t, d = closest_point_edge_edge(
        np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.5, -0.5, 1]), np.array([0.5, 0.5, 1])
    )
    assert d == pytest.approx(1.0)
    np.testing.assert_allclose(c, [0.5, 0.5, -0.5, -0.5], atol=1e-15)
    _, _, d = closest_point_edge_edge(
        np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]), np.array([1.0, 1, 0])
    )
    assert d == pytest.approx(1.0)


def _single_constraint(c, t, kappa=1.0, d_hat=1.0):
    x = np.zeros((4, 3))
    x[0] = t  # with c = (1, -1, 0, 0) and x1 = 0, t = x0
    return ConstraintSet(np.array([Kind.PT]), np.arange(4)[None], np.array([c], float),
                         np.array([t], float), np.array([np.linalg.norm(t)]), kappa, d_hat), x


def test_barrier_diagonal_building_blocks():
    cs, x = _single_constraint([1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 0.5])
    c = cs.c[0]
    np.testing.assert_array_equal(np.repeat(c**2, 3), [1] * 6 + [0] * 6)
    ct = (c[:, None] * cs.t[0][None, :]).ravel() ** 2
    np.testing.assert_allclose(ct, [0, 0, 0.25, 0, 0, 0.25] + [0] * 6)


def test_point_point_gradient_is_equal_and_opposite():
    cs, x = _single_constraint([1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 0.5])
    g = cs.gradient(4, x)
    np.testing.assert_allclose(g[0], -g[1])
    assert np.linalg.norm(g[0]) > 0
    np.testing.assert_array_equal(g[2:], 0.0)


# solver


def test_beta_dk_hand_case():
    P = np.ones((1, 2))
    beta = beta_dk(np.array([[0.0, 1.0]]), np.array([[-1.0, 0.0]]), np.array([[1.0, 0.0]]), P)
    assert beta == pytest.approx(1.0)
    p_next = -P * np.array([[0.0, 1.0]]) + beta * np.array([[1.0, 0.0]])
    np.testing.assert_allclose(p_next, [[1.0, -1.0]])


def test_beta_dk_degenerate_cases():
    g = np.array([[1.0, -2.0, 0.5]])
    p = -g
    P = np.ones_like(g)
    assert beta_dk(np.zeros_like(g), g, p, P) == 0.0
    assert beta_dk(g, g, p, P) == 0.0


def test_beta_baselines():
    g = np.array([[1.0, 0.5, -0.3]])
    P = np.ones_like(g)
    assert beta_baseline(BetaVariant.FR, g, g, -g, P) == pytest.approx(1.0)
    assert beta_baseline(BetaVariant.PRP, g, g, -g, P) == 0.0
    beta = beta_baseline(BetaVariant.FR, np.array([[0.0, 2.0]]), np.array([[1.0, 0.0]]),
                         np.array([[-1.0, 0.0]]), np.ones((1, 2)))
    assert beta == pytest.approx(4.0)


def test_line_search_examples():
    cfg = SolverConfig()
    # E = x^2 / 2 at x = 2 with p = -g
    s = line_search_alpha(gp=-4.0, quad=4.0, p_inf=2.0, d_hat=100.0, config=cfg)
    assert s.alpha == pytest.approx(1.0) and not s.capped
    # alpha_upper = 0.02 / (2 * 0.5) = 0.02 binds against alpha_bar = 0.1
    s = line_search_alpha(gp=-1.0, quad=10.0, p_inf=0.5, d_hat=0.02, config=cfg)
    assert s.alpha == pytest.approx(0.02) and s.capped


def test_pure_inertia_step_lands_on_target(block):
    rng = np.random.default_rng(3)
    x = block.vertices_rest
    x_tilde = x + 1e-3 * rng.normal(size=x.shape)
    problem = IncrementalPotential(block, [], x_tilde, 0.01)
    ev, g, P = assemble_gradient_and_preconditioner(problem, x, SolverConfig())
    np.testing.assert_allclose(g, block.mass[:, None] * (x - x_tilde))
    np.testing.assert_allclose(P, 1.0 / np.repeat(block.mass[:, None], 3, axis=1))
    p = -P * g
    s = line_search_alpha(float(np.sum(g * p)), ev.quadratic_form(p), float(np.abs(p).max()), 1.0,
                          SolverConfig())
    assert s.alpha == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(x + s.alpha * p, x_tilde, atol=1e-15)


def test_rest_pose_gradient_and_preconditioner(block):
    x = block.vertices_rest
    problem = IncrementalPotential(block, [MaterialGroup(material(Model.ARAP), np.arange(block.n_tets))],
                                   x.copy(), 0.01)
    _, g, P = assemble_gradient_and_preconditioner(problem, x, SolverConfig())
    np.testing.assert_allclose(g, 0.0, atol=1e-15)
    assert np.all(P > 0) and np.all(P <= 1.0 / block.mass[:, None])
