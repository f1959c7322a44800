"""
Tests for the boundary density, the distributed derivative and the
finite-difference oracle.
"""

import numpy as np
import pandas as pd
import pytest

from config.settings import INNER_FREE
from src.fields import LinearField
from src.mesh import annulus_for_case, inner_loop
from src.models import FlowField
from src.optimizer import ShapeProblem, default_perturbations
from src.shape_calculus import (
    boundary_gradient_density, boundary_pairing, bump_field, distributed_gradient,
    distributed_shape_derivative, fd_shape_derivative, gradient_check, normal_field,
    radial_field, save_density_csv, tangential_field, taylor_table,
)
from src.stokes_fem import solve_adjoint
from src.utils import relative_difference


def _nodal_flow(mesh, velocity):
    return FlowField(np.asarray(velocity, dtype=float), np.zeros((mesh.n_triangles, 2)),
                     np.zeros(mesh.n_nodes))


def _p1_gradient(points, values):
    """[c, d] = d u_c / d x_d of the linear interpolant on one triangle."""
    edges = np.column_stack([points[1] - points[0], points[2] - points[0]])
    jumps = np.column_stack([values[1] - values[0], values[2] - values[0]])
    return jumps @ np.linalg.inv(edges)


def _density(mesh, problem, y, v, **kwargs):
    return boundary_gradient_density(mesh, problem.alpha, y, v, problem.g, problem.y_d,
                                     f=problem.f, **kwargs)


def test_density_vanishes_when_target_is_met(coarse_mesh, problem):
    """y = y_d on Gamma, v = 0 and g = 0 give w = 0."""
    y = _nodal_flow(coarse_mesh, problem.y_d(coarse_mesh.nodes))
    v = FlowField.zeros(coarse_mesh)
    density = _density(coarse_mesh, problem, y, v, recovery="patch")
    assert np.all(density.values == 0), "no misfit and no adjoint leave no density"


def test_density_is_misfit_without_adjoint(coarse_mesh, problem):
    """With v = 0 the density reduces to 1/2 |y - y_d|^2."""
    y = FlowField.zeros(coarse_mesh)
    v = FlowField.zeros(coarse_mesh)
    density = _density(coarse_mesh, problem, y, v, recovery="patch")
    expected = 0.5 * np.sum(problem.y_d(coarse_mesh.nodes[density.node_ids]) ** 2, axis=1)
    assert np.allclose(density.values, expected, rtol=1e-14, atol=0)
    assert np.array_equal(density.node_ids, inner_loop(coarse_mesh))


def test_density_sign_on_case1(case1_mesh, problem, case1_solution):
    """Shrinking the oversized hole lowers J, so the density is negative."""
    y, v = case1_solution
    for recovery in ("flux", "patch", "element"):
        density = _density(case1_mesh, problem, y, v, recovery=recovery)
        assert np.all(np.isfinite(density.values)), f"{recovery} density must be finite"
        assert np.mean(density.values < 0) >= 0.9, f"{recovery} density has the wrong sign"
    with pytest.raises(ValueError):
        _density(case1_mesh, problem, y, v, recovery="spline")


def test_flux_recovery_needs_force(coarse_mesh, problem):
    y, _ = problem.solve(coarse_mesh)
    v = solve_adjoint(coarse_mesh, problem.alpha, y, problem.y_d)
    with pytest.raises(ValueError, match="body force"):
        boundary_gradient_density(coarse_mesh, problem.alpha, y, v, problem.g, problem.y_d,
                                  recovery="flux")


def test_element_recovery_averages_products(coarse_mesh, problem):
    """Each node gets the edge-length-weighted mean of (Dy_T - Dg):Dv_T over its two edges."""
    y, _ = problem.solve(coarse_mesh)
    v = solve_adjoint(coarse_mesh, problem.alpha, y, problem.y_d)
    g = LinearField([[0.3, -1.0], [0.5, 0.2]])
    density = boundary_gradient_density(coarse_mesh, problem.alpha, y, v, g, problem.y_d,
                                        recovery="element")

    dg = g.jacobian(coarse_mesh.nodes[:1])[0]
    total, weight = {}, {}
    for a, b, marker in coarse_mesh.boundary_edges:
        if marker != INNER_FREE:
            continue
        owner = next(tri for tri in coarse_mesh.triangles if a in tri and b in tri)
        points = coarse_mesh.nodes[owner]
        dy = _p1_gradient(points, y.velocity_nodal[owner])
        dv = _p1_gradient(points, v.velocity_nodal[owner])
        length = np.linalg.norm(coarse_mesh.nodes[b] - coarse_mesh.nodes[a])
        for node in (a, b):
            total[node] = total.get(node, 0.0) + length * np.sum((dy - dg) * dv)
            weight[node] = weight.get(node, 0.0) + length

    x = coarse_mesh.nodes[density.node_ids]
    misfit = 0.5 * np.sum((y.velocity_nodal[density.node_ids] - problem.y_d(x)) ** 2, axis=1)
    expected = misfit + problem.alpha * np.array([total[i] / weight[i] for i in density.node_ids])
    assert np.allclose(density.values, expected, rtol=1e-10, atol=1e-14), \
        "element rule must average the per-triangle products"


def test_flux_density_beats_patch_on_coarse_mesh(coarse_mesh, problem):
    """Reaction-based fluxes track the distributed form closer than patch fits."""
    y, _ = problem.solve(coarse_mesh)
    v = solve_adjoint(coarse_mesh, problem.alpha, y, problem.y_d)
    V = radial_field(coarse_mesh)
    reference = distributed_shape_derivative(coarse_mesh, problem.alpha, y, v, V,
                                             problem.f, problem.g, problem.y_d)
    flux = boundary_pairing(_density(coarse_mesh, problem, y, v, recovery="flux"),
                            coarse_mesh, V)
    patch = boundary_pairing(_density(coarse_mesh, problem, y, v, recovery="patch"),
                             coarse_mesh, V)
    assert relative_difference(flux, reference) < relative_difference(patch, reference), \
        f"flux {flux:.6e} and patch {patch:.6e} against distributed {reference:.6e}"


def test_tangential_field_pairs_to_zero(case1_mesh, problem, case1_solution):
    y, v = case1_solution
    density = _density(case1_mesh, problem, y, v)
    assert boundary_pairing(density, case1_mesh, tangential_field(case1_mesh)) == 0.0


def test_zero_perturbation(coarse_mesh, problem):
    y, _ = problem.solve(coarse_mesh)
    v = solve_adjoint(coarse_mesh, problem.alpha, y, problem.y_d)
    zero = np.zeros_like(coarse_mesh.nodes)
    assert distributed_shape_derivative(coarse_mesh, problem.alpha, y, v, zero,
                                        problem.f, problem.g, problem.y_d) == 0.0
    assert fd_shape_derivative(coarse_mesh, problem.alpha, zero, problem.f, problem.g,
                               problem.y_d, 1e-3) == 0.0
    with pytest.raises(ValueError):
        fd_shape_derivative(coarse_mesh, problem.alpha, zero, problem.f, problem.g,
                            problem.y_d, 0.0)


def test_distributed_derivative_is_linear(case1_mesh, problem, case1_solution):
    y, v = case1_solution
    V1, V2 = radial_field(case1_mesh), bump_field(case1_mesh)

    def dJ(V):
        return distributed_shape_derivative(case1_mesh, problem.alpha, y, v, V,
                                            problem.f, problem.g, problem.y_d)

    combined = dJ(2.0 * V1 - 0.5 * V2)
    separate = 2.0 * dJ(V1) - 0.5 * dJ(V2)
    assert abs(combined - separate) <= 1e-10 * max(abs(combined), abs(separate))


def test_distributed_gradient_matches_single_node_move(coarse_mesh, problem):
    """r_i . e_x is the derivative of J when only node i moves in x."""
    y, _ = problem.solve(coarse_mesh)
    v = solve_adjoint(coarse_mesh, problem.alpha, y, problem.y_d)
    r = distributed_gradient(coarse_mesh, problem.alpha, y, v, problem.f, problem.g, problem.y_d)
    assert r.shape == coarse_mesh.nodes.shape

    node = inner_loop(coarse_mesh)[0]
    V = np.zeros_like(coarse_mesh.nodes)
    V[node, 0] = 1.0
    fd = fd_shape_derivative(coarse_mesh, problem.alpha, V, problem.f, problem.g,
                             problem.y_d, 1e-4)
    assert relative_difference(r[node, 0], fd) < 1e-3, \
        f"nodal gradient {r[node, 0]:.6e} against finite difference {fd:.6e}"


def test_perturbation_fields_fix_outer_circle(coarse_mesh):
    outer = coarse_mesh.nodes_with_marker(1)
    for name, V in default_perturbations(coarse_mesh).items():
        assert V.shape == coarse_mesh.nodes.shape
        assert np.all(V[outer] == 0), f"{name} field must vanish on the outer circle"
    loop = inner_loop(coarse_mesh)
    assert np.allclose(np.linalg.norm(normal_field(coarse_mesh)[loop], axis=1), 1.0)


def test_gradient_check_table(small_mesh, problem):
    fields = {'radial': radial_field(small_mesh)}
    table = gradient_check(small_mesh, problem.alpha, fields, problem.f, problem.g,
                           problem.y_d, 1e-3)
    assert list(table.columns) == ['field', 'boundary', 'distributed', 'fd', 'boundary_vs_fd',
                                   'distributed_vs_fd', 'boundary_vs_distributed']
    assert table.loc[0, 'field'] == 'radial'
    assert table.loc[0, 'distributed_vs_fd'] < 1e-2, \
        "distributed form differentiates the discrete cost"


def test_density_csv(tmp_path, coarse_mesh, problem):
    y, _ = problem.solve(coarse_mesh)
    v = solve_adjoint(coarse_mesh, problem.alpha, y, problem.y_d)
    density = _density(coarse_mesh, problem, y, v)
    path = tmp_path / "density.csv"
    save_density_csv(path, coarse_mesh, density)
    frame = pd.read_csv(path, float_precision="round_trip")
    assert list(frame.columns) == ['node_id', 'x', 'y', 'w', 's', 'nx', 'ny']
    assert len(frame) == 32
    assert frame['node_id'].min() == 1, "node ids are 1-based"
    assert np.array_equal(frame['w'].to_numpy(), density.values), "17 digits round-trip exactly"


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [1.0, 0.01])
def test_three_forms_agree(case1_mesh, alpha):
    problem = ShapeProblem.manufactured(alpha)
    table = gradient_check(case1_mesh, alpha, default_perturbations(case1_mesh),
                           problem.f, problem.g, problem.y_d, 1e-3)
    worst = table[['boundary_vs_fd', 'distributed_vs_fd', 'boundary_vs_distributed']].max()
    assert (worst <= 0.05).all(), f"gradient forms disagree:\n{table}"
    assert (table['distributed_vs_fd'] <= 1e-4).all(), "distributed form is exact for discrete J"


@pytest.mark.slow
def test_central_difference_is_second_order(case1_mesh, problem):
    table = taylor_table(case1_mesh, problem.alpha, radial_field(case1_mesh),
                         problem.f, problem.g, problem.y_d, 1e-2, levels=3)
    ratio = table.loc[1, 'ratio']
    assert 3.0 <= ratio <= 5.0, f"Richardson ratio {ratio} should be close to 4\n{table}"


def _tangential_ratio(mesh, problem):
    tangential = fd_shape_derivative(mesh, problem.alpha, tangential_field(mesh),
                                     problem.f, problem.g, problem.y_d, 1e-3)
    normal = fd_shape_derivative(mesh, problem.alpha, normal_field(mesh),
                                 problem.f, problem.g, problem.y_d, 1e-3)
    return abs(tangential) / abs(normal)


def _target_ratio(n_theta, n_r, problem):
    target = annulus_for_case("target", n_theta, n_r)
    start = annulus_for_case("circle_04", n_theta, n_r)
    at_target = fd_shape_derivative(target, problem.alpha, radial_field(target),
                                    problem.f, problem.g, problem.y_d, 1e-3)
    at_start = fd_shape_derivative(start, problem.alpha, radial_field(start),
                                   problem.f, problem.g, problem.y_d, 1e-3)
    return abs(at_target) / abs(at_start)


@pytest.mark.slow
def test_tangential_motion_barely_changes_cost(case1_mesh, problem):
    """Tangential invariance holds up to discretization error, which shrinks under refinement."""
    coarse = _tangential_ratio(case1_mesh, problem)
    fine = _tangential_ratio(annulus_for_case("circle_04", 128, 32), problem)
    assert fine < coarse, f"ratio {fine:.3e} at 128x32 should be below {coarse:.3e} at 64x16"
    assert fine <= 1e-2, f"tangential/normal ratio {fine:.3e} at 128x32"


@pytest.mark.slow
def test_target_is_nearly_stationary(problem):
    """The target annulus is stationary up to discretization error."""
    coarse = _target_ratio(64, 16, problem)
    fine = _target_ratio(128, 32, problem)
    assert fine < coarse, f"ratio {fine:.3e} at 128x32 should be below {coarse:.3e} at 64x16"
    assert fine <= 1e-2, f"target/start ratio {fine:.3e} at 128x32"
