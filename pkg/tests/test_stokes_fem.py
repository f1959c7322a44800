"""
Tests for the MINI-element Stokes state and adjoint solves.
"""

import numpy as np
import pytest

from src.errors import CompatibilityViolated
from src.fields import (
    ConstantField, FunctionField, LinearField, ZeroField, target_velocity,
)
from src.models import FlowField, TriMesh
from src.stokes_fem import (
    ElementGeometry, assemble_stokes, boundary_reaction, compute_cost, domain_area,
    evaluate_at_quadrature, manufactured_convergence, pressure_mean, solve_adjoint, solve_state,
    state_system, velocity_at_quadrature, velocity_gradient_at_quadrature,
)
from tests.conftest import single_triangle

ROTATION = LinearField([[0.0, -1.0], [1.0, 0.0]])


def _discrete_divergence(system, flow):
    """b(y_h, lambda_m) for every pressure hat function, bubble part included."""
    u = np.concatenate([flow.velocity_nodal[:, 0], flow.velocity_nodal[:, 1]])
    div = system.divergence_block() @ u
    bubble = np.einsum('tki,tk->ti', system.bubble_coupling, flow.velocity_bubble)
    np.add.at(div, system.triangles.ravel(), bubble.ravel())
    scale = abs(system.divergence_block()) @ np.abs(u)
    return div, float(scale.max())


def test_element_stiffness_rows_sum_to_zero():
    """Viscous block annihilates constants on a single triangle."""
    mesh = single_triangle([[0.0, 0.0], [2.0, 0.1], [0.3, 1.5]])
    K = assemble_stokes(mesh, 1.0).velocity_block().toarray()
    assert np.allclose(K.sum(axis=1), 0.0, atol=1e-14), "rows of K must sum to zero"
    assert np.allclose(K, K.T, atol=0), "K must be symmetric"


def test_viscosity_scaling_of_blocks():
    mesh = single_triangle([[0.0, 0.0], [1.0, 0.0], [0.2, 0.9]])
    one = assemble_stokes(mesh, 1.0)
    ten = assemble_stokes(mesh, 10.0)
    assert np.allclose(ten.velocity_block().toarray(), 10.0 * one.velocity_block().toarray(),
                       rtol=1e-14, atol=0)
    assert np.array_equal(ten.divergence_block().toarray(), one.divergence_block().toarray()), \
        "divergence block does not depend on alpha"


def test_rejects_nonpositive_alpha(small_mesh):
    with pytest.raises(ValueError):
        assemble_stokes(small_mesh, 0.0)


def test_divergence_of_constant_field(coarse_mesh):
    B = assemble_stokes(coarse_mesh, 1.0).divergence_block()
    n = coarse_mesh.n_nodes
    u = np.concatenate([np.full(n, 0.7), np.full(n, -1.3)])
    assert np.abs(B @ u).max() < 1e-14


def test_system_is_symmetric(coarse_mesh):
    M = assemble_stokes(coarse_mesh, 0.5).matrix
    assert abs(M - M.T).max() < 1e-15


def test_zero_data_gives_zero_solution(small_mesh):
    flow = solve_state(small_mesh, 1.0, ZeroField(), ZeroField())
    assert np.all(flow.velocity_nodal == 0)
    assert np.all(flow.velocity_bubble == 0)
    assert np.all(flow.pressure_nodal == 0)


def test_net_flux_is_rejected(small_mesh):
    """Outflow through the inner circle only cannot be divergence-free."""
    def radial_inside(x):
        r = np.linalg.norm(x, axis=1)[:, None]
        return np.where(r < 0.7, x / r, 0.0)

    with pytest.raises(CompatibilityViolated):
        solve_state(small_mesh, 1.0, ZeroField(), FunctionField(radial_inside))


def test_rigid_rotation_is_reproduced(coarse_mesh):
    """A linear divergence-free boundary datum is the exact discrete solution."""
    flow = solve_state(coarse_mesh, 0.3, ZeroField(), ROTATION)
    assert np.allclose(flow.velocity_nodal, ROTATION(coarse_mesh.nodes), atol=1e-10)
    assert np.allclose(flow.velocity_bubble, 0.0, atol=1e-10)
    assert np.allclose(flow.pressure_nodal, 0.0, atol=1e-10)


def test_rotation_reaction_balances_energy(coarse_mesh):
    """sum_i R_i . g_i = alpha * int |D y|^2 = 2 alpha |Omega| for a rotation."""
    alpha = 0.3
    system = state_system(coarse_mesh, alpha, ZeroField(), ROTATION)
    flow = system.solve()
    reaction = boundary_reaction(system, flow)
    work = float(np.sum(reaction * ROTATION(coarse_mesh.nodes)))
    expected = 2.0 * alpha * domain_area(coarse_mesh)
    assert abs(work - expected) <= 1e-9 * expected
    interior = coarse_mesh.nodes_with_marker(0)
    assert np.all(reaction[interior] == 0), "reaction lives on Dirichlet nodes only"


def test_state_boundary_values_and_constraints(case1_mesh, problem):
    system = state_system(case1_mesh, problem.alpha, problem.f, problem.g)
    flow = system.solve()
    boundary = case1_mesh.boundary_nodes()
    assert np.all(flow.velocity_nodal[boundary] == 0), "Dirichlet values are imposed exactly"

    p_max = np.abs(flow.pressure_nodal).max()
    assert abs(pressure_mean(case1_mesh, flow.pressure_nodal)) \
        <= 1e-10 * domain_area(case1_mesh) * max(p_max, 1.0)

    div, scale = _discrete_divergence(system, flow)
    assert np.abs(div).max() <= 1e-10 * scale, "discrete divergence must vanish"


def test_energy_identity(case1_mesh, problem, case1_solution):
    """With zero boundary data, alpha int |Dy|^2 = int f . y."""
    y, _ = case1_solution
    geom = ElementGeometry.from_mesh(case1_mesh)
    DY = velocity_gradient_at_quadrature(case1_mesh, geom, y)
    Y = velocity_at_quadrature(case1_mesh, geom, y)
    F = evaluate_at_quadrature(geom, problem.f)
    energy = problem.alpha * np.einsum('tq,tqcd,tqcd->', geom.quad_weights, DY, DY)
    work = np.einsum('tq,tqc,tqc->', geom.quad_weights, F, Y)
    assert abs(energy - work) <= 1e-9 * abs(work)


def test_alpha_scaling_of_solution(coarse_mesh):
    """(c alpha, c f) keeps the velocity and scales the pressure by c."""
    c = 7.0
    matrix, offset = np.array([[1.0, 0.5], [0.0, -0.3]]), np.array([0.2, 0.1])
    base = solve_state(coarse_mesh, 0.1, LinearField(matrix, offset), ZeroField())
    scaled = solve_state(coarse_mesh, 0.1 * c, LinearField(c * matrix, c * offset), ZeroField())
    v_scale = np.abs(base.velocity_nodal).max()
    p_scale = np.abs(base.pressure_nodal).max()
    assert v_scale > 0 and p_scale > 0
    assert np.abs(scaled.velocity_nodal - base.velocity_nodal).max() <= 1e-9 * v_scale
    assert np.abs(scaled.pressure_nodal - c * base.pressure_nodal).max() <= 1e-9 * c * p_scale


def test_adjoint_vanishes_when_state_matches_target(coarse_mesh):
    """Zero misfit drives the adjoint to zero up to round-off."""
    n = coarse_mesh.n_nodes
    y = FlowField(np.tile([0.3, -0.2], (n, 1)), np.zeros((coarse_mesh.n_triangles, 2)),
                  np.zeros(n))
    v = solve_adjoint(coarse_mesh, 1.0, y, ConstantField([0.3, -0.2]))
    assert np.abs(v.velocity_nodal).max() <= 1e-12, "adjoint velocity must vanish"
    assert np.abs(v.velocity_bubble).max() <= 1e-12, "adjoint bubbles must vanish"
    assert np.abs(v.pressure_nodal).max() <= 1e-12, "adjoint pressure must vanish"


def test_adjoint_symmetry(case1_mesh, problem, case1_solution):
    """int r1 . v2 = int r2 . v1 for adjoints v1, v2 driven by r1, r2."""
    y, v1 = case1_solution
    r2 = LinearField([[0.2, -1.0], [0.5, -0.2]], [0.1, 0.3])
    v2 = solve_adjoint(case1_mesh, problem.alpha, FlowField.zeros(case1_mesh),
                       LinearField(-r2.matrix, -r2.offset))

    geom = ElementGeometry.from_mesh(case1_mesh)
    w = geom.quad_weights
    r1 = velocity_at_quadrature(case1_mesh, geom, y) - evaluate_at_quadrature(geom, problem.y_d)
    left = np.einsum('tq,tqc,tqc->', w, r1, velocity_at_quadrature(case1_mesh, geom, v2))
    right = np.einsum('tq,tqc,tqc->', w, evaluate_at_quadrature(geom, r2),
                      velocity_at_quadrature(case1_mesh, geom, v1))
    assert abs(left - right) <= 1e-9 * max(abs(left), abs(right))


def test_case1_adjoint_is_nonzero(case1_solution):
    _, v = case1_solution
    assert np.abs(v.velocity_nodal).max() > 0


def test_cost_reference_values():
    square = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
                     [[0, 1, 2], [0, 2, 3]], np.zeros((0, 3), dtype=int), np.zeros(4, dtype=int))
    y = FlowField(np.tile([1.0, 0.0], (4, 1)), np.zeros((2, 2)), np.zeros(4))
    assert abs(compute_cost(square, y, ZeroField()) - 0.5) < 1e-14, "1/2 * |1|^2 * area"
    assert compute_cost(square, y, ConstantField([1.0, 0.0])) < 1e-28, "no misfit, no cost"


def test_target_mesh_nearly_reproduces_target(problem):
    """On the optimal annulus the discrete state is close to y_d."""
    from src.mesh import annulus_for_case
    mesh = annulus_for_case("target", 64, 16)
    y = solve_state(mesh, problem.alpha, problem.f, problem.g)
    assert compute_cost(mesh, y, target_velocity()) < 1e-5


@pytest.mark.slow
def test_manufactured_convergence_rates():
    table = manufactured_convergence(1.0, [(32, 8), (64, 16), (128, 32)])
    assert list(table.columns[:6]) == ['n_theta', 'n_r', 'h', 'velocity_l2', 'velocity_h1',
                                       'pressure_l2']
    last = table.iloc[-1]
    assert 3.2 <= last['velocity_l2_ratio'] <= 4.8, f"L2 ratio {last['velocity_l2_ratio']}"
    assert 1.6 <= last['velocity_h1_ratio'] <= 2.4, f"H1 ratio {last['velocity_h1_ratio']}"
    assert 1.6 <= last['pressure_l2_ratio'] <= 4.8, f"pressure ratio {last['pressure_l2_ratio']}"
