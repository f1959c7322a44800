"""
Tests for annulus generation, validation, measurement and deformation.
"""

import numpy as np
import pytest

from config.settings import INNER_FREE, OUTER_FIXED
from src.errors import MeshValidationError, StepTooLarge
from src.mesh import (
    boundary_normals, circle_curve, deform_mesh, ellipse_curve, generate_annulus_mesh,
    inner_loop, inner_perimeter, mean_inner_radius, mesh_quality, radius_rms_error,
    validate_mesh,
)
from src.models import TriMesh
from src.shape_calculus import radial_field
from tests.conftest import single_triangle


def test_annulus_area_and_counts():
    """Target annulus area approximates pi (1 - 0.04)."""
    mesh = generate_annulus_mesh(circle_curve(0.2), 1.0, 64, 16)
    assert mesh.n_nodes == 64 * 17, "n_theta * (n_r + 1) nodes expected"
    assert mesh.n_triangles == 2 * 64 * 16, "two triangles per quad expected"
    assert abs(mesh.signed_areas().sum() - np.pi * 0.96) < 1e-2, "annulus area mismatch"
    assert mesh.signed_areas().min() > 0, "all triangles must be counterclockwise"


def test_inner_nodes_lie_on_curve():
    """INNER_FREE nodes are exact samples of the inner curve."""
    circle = generate_annulus_mesh(circle_curve(0.4), 1.0, 32, 8)
    r = np.linalg.norm(circle.nodes[circle.nodes_with_marker(INNER_FREE)], axis=1)
    assert np.allclose(r, 0.4, atol=1e-15), "Case 1 inner nodes must sit on r = 0.4"

    ellipse = generate_annulus_mesh(ellipse_curve(0.6, 0.4), 1.0, 32, 8)
    x = ellipse.nodes[ellipse.nodes_with_marker(INNER_FREE)]
    level = x[:, 0] ** 2 / 0.36 + x[:, 1] ** 2 / 0.16
    assert np.allclose(level, 1.0, atol=1e-12), "Case 2 inner nodes must sit on the ellipse"


def test_generator_rejects_bad_input():
    """Too few angles and inverted inner curves are rejected."""
    with pytest.raises(ValueError):
        generate_annulus_mesh(circle_curve(0.4), 1.0, 7, 4)

    def clockwise(theta):
        return 0.3 * np.column_stack([np.cos(theta), -np.sin(theta)])

    with pytest.raises(MeshValidationError):
        generate_annulus_mesh(clockwise, 1.0, 16, 4)

    with pytest.raises(MeshValidationError):
        generate_annulus_mesh(circle_curve(1.2), 1.0, 16, 4)


def test_validate_mesh_catches_broken_markers(small_mesh):
    markers = small_mesh.node_markers.copy()
    markers[small_mesh.nodes_with_marker(INNER_FREE)[0]] = OUTER_FIXED
    broken = TriMesh(small_mesh.nodes, small_mesh.triangles, small_mesh.boundary_edges, markers)
    with pytest.raises(MeshValidationError):
        validate_mesh(broken)


def test_validate_mesh_catches_clockwise_triangle(small_mesh):
    triangles = small_mesh.triangles.copy()
    triangles[0] = triangles[0][[0, 2, 1]]
    broken = TriMesh(small_mesh.nodes, triangles, small_mesh.boundary_edges,
                     small_mesh.node_markers)
    with pytest.raises(MeshValidationError, match="negative"):
        validate_mesh(broken)


def test_validate_mesh_rejects_non_finite_coordinates(small_mesh):
    """A nan coordinate gives nan areas, which must not pass the area check."""
    nodes = small_mesh.nodes.copy()
    nodes[small_mesh.triangles[0, 0], 0] = np.nan
    with pytest.raises(MeshValidationError, match="non-finite"):
        validate_mesh(small_mesh.with_nodes(nodes))


def test_mesh_quality_reference_triangles():
    """Equilateral scores 1; the unit right isoceles triangle scores 2*sqrt(2) - 2."""
    equilateral = single_triangle([[0, 0], [1, 0], [0.5, np.sqrt(3) / 2]])
    assert abs(mesh_quality(equilateral) - 1.0) < 1e-14, "equilateral quality must be 1"

    right = single_triangle([[0, 0], [1, 0], [0, 1]])
    assert abs(mesh_quality(right) - (2 * np.sqrt(2) - 2)) < 1e-14, \
        "right isoceles quality is 2*inradius/circumradius"


def test_deform_identity(small_mesh):
    """Zero displacement or zero step leaves the mesh unchanged."""
    zero = np.zeros_like(small_mesh.nodes)
    assert deform_mesh(small_mesh, zero, 1.0) == small_mesh
    assert deform_mesh(small_mesh, radial_field(small_mesh), 0.0) == small_mesh


def test_deform_rejects_negative_step(small_mesh):
    with pytest.raises(ValueError):
        deform_mesh(small_mesh, np.zeros_like(small_mesh.nodes), -1.0)


def test_deform_step_too_large(case1_mesh):
    """Collapsing every node 0.7 towards the origin inverts triangles."""
    r = np.linalg.norm(case1_mesh.nodes, axis=1)
    outward = case1_mesh.nodes / r[:, None]
    with pytest.raises(StepTooLarge):
        deform_mesh(case1_mesh, outward, 0.7)


def test_deform_shifts_inner_radius(case1_mesh):
    """Radial field of unit size on the inner loop moves it by h."""
    h = 1e-3
    moved = deform_mesh(case1_mesh, radial_field(case1_mesh), h)
    assert moved.signed_areas().min() > 0
    assert abs(mean_inner_radius(moved) - (0.4 - h)) < 1e-9, "inner radius should shrink by h"
    assert np.array_equal(moved.triangles, case1_mesh.triangles), "connectivity must not change"


def test_deform_is_linear(coarse_mesh):
    d = radial_field(coarse_mesh)
    twice = deform_mesh(deform_mesh(coarse_mesh, d, 0.01), d, 0.02)
    once = deform_mesh(coarse_mesh, d, 0.03)
    assert np.allclose(twice.nodes, once.nodes, rtol=0, atol=1e-14)


def test_inner_perimeter_changes_linearly(case1_mesh):
    d = radial_field(case1_mesh)
    base = inner_perimeter(case1_mesh)
    big = abs(inner_perimeter(deform_mesh(case1_mesh, d, 1e-2)) - base)
    small = abs(inner_perimeter(deform_mesh(case1_mesh, d, 1e-3)) - base)
    assert 9.0 < big / small < 11.0, f"perimeter change ratio {big / small} should be ~10"


def test_inner_loop_order(coarse_mesh):
    """Loop starts at the lowest id and runs counterclockwise."""
    loop = inner_loop(coarse_mesh)
    assert loop[0] == coarse_mesh.nodes_with_marker(INNER_FREE).min()
    assert sorted(loop) == sorted(coarse_mesh.nodes_with_marker(INNER_FREE))
    p = coarse_mesh.nodes[loop]
    q = np.roll(p, -1, axis=0)
    assert np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]) > 0, "loop must be counterclockwise"


def test_boundary_normals_on_circles(case1_mesh):
    """Normals point to the origin on the inner loop and away from it outside."""
    normals, measures = boundary_normals(case1_mesh)
    inner = case1_mesh.nodes_with_marker(INNER_FREE)
    outer = case1_mesh.nodes_with_marker(OUTER_FIXED)
    x = case1_mesh.nodes
    r = np.linalg.norm(x, axis=1)[:, None]
    assert np.allclose(normals[inner], -x[inner] / r[inner], atol=1e-12)
    assert np.allclose(normals[outer], x[outer] / r[outer], atol=1e-12)
    assert abs(measures[inner].sum() - inner_perimeter(case1_mesh)) < 1e-14
    interior = case1_mesh.nodes_with_marker(0)
    assert np.all(measures[interior] == 0), "interior nodes carry no boundary measure"


def test_radius_rms_error(coarse_mesh):
    assert abs(radius_rms_error(coarse_mesh, 0.2) - 0.2) < 1e-14
    assert radius_rms_error(coarse_mesh, 0.4) < 1e-14
