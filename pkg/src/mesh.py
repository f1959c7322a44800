"""
Mesh - Generation, measurement and deformation of annular triangle meshes.

The domain has a fixed outer boundary (OUTER_FIXED) and a free inner
boundary (INNER_FREE). Every function returns new meshes; TriMesh values are
never modified in place.
"""

import logging
from typing import Callable, Tuple

import numpy as np
from scipy import sparse

from config.settings import (
    AREA_EPSILON_FACTOR, CASE_RADIUS, ELLIPSE_SEMI_AXES, INNER_FREE, INTERIOR,
    MIN_N_R, MIN_N_THETA, OUTER_FIXED, OUTER_RADIUS, TARGET_RADIUS,
)
from src.errors import MeshValidationError, StepTooLarge
from src.models import DisplacementField, TriMesh

logger = logging.getLogger(__name__)

# Parametric closed curve: maps angles (n,) to points (n, 2), counterclockwise.
InnerCurve = Callable[[np.ndarray], np.ndarray]


def circle_curve(radius: float) -> InnerCurve:
    """Circle of the given radius centred at the origin."""
    def curve(theta):
        return radius * np.column_stack([np.cos(theta), np.sin(theta)])
    return curve


def ellipse_curve(a: float, b: float) -> InnerCurve:
    """Axis-aligned ellipse with semi-axes a (x) and b (y)."""
    def curve(theta):
        return np.column_stack([a * np.cos(theta), b * np.sin(theta)])
    return curve


def case_inner_curve(case: str) -> InnerCurve:
    """
    Inner boundary of a named experiment.

    Args:
        case: circle_04 (Case 1), ellipse (Case 2) or target (optimal shape)

    Returns:
        Parametric inner curve
    """
    if case == "circle_04":
        return circle_curve(CASE_RADIUS)
    if case == "ellipse":
        return ellipse_curve(*ELLIPSE_SEMI_AXES)
    if case == "target":
        return circle_curve(TARGET_RADIUS)
    raise ValueError(f"Unknown case: {case}")


def generate_annulus_mesh(
    inner_curve: InnerCurve,
    outer_radius: float,
    n_theta: int,
    n_r: int
) -> TriMesh:
    """
    Structured triangulation between an inner curve and an outer circle.

    Node (j, i) sits on ring j (0 = inner curve, n_r = outer circle) at angle
    theta_i = 2*pi*i/n_theta, linearly interpolated between the inner-curve
    point and the outer-circle point of that angle. Each quad is split along
    the same diagonal.

    Args:
        inner_curve: Counterclockwise parametric inner boundary
        outer_radius: Radius of the fixed outer circle
        n_theta: Number of angular samples (>= 8)
        n_r: Number of radial intervals (>= 2)

    Returns:
        Validated TriMesh
    """
    if n_theta < MIN_N_THETA:
        raise ValueError(f"n_theta={n_theta} is below the minimum {MIN_N_THETA}")
    if n_r < MIN_N_R:
        raise ValueError(f"n_r={n_r} is below the minimum {MIN_N_R}")
    if outer_radius <= 0:
        raise ValueError(f"outer_radius must be positive, got {outer_radius}")

    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    inner = np.asarray(inner_curve(theta), dtype=float).reshape(n_theta, 2)
    outer = outer_radius * np.column_stack([np.cos(theta), np.sin(theta)])
    s = np.arange(n_r + 1) / n_r

    nodes = ((1.0 - s)[:, None, None] * inner[None] + s[:, None, None] * outer[None])
    nodes = nodes.reshape(-1, 2)

    def idx(j, i):
        return j * n_theta + (i % n_theta)

    j, i = np.meshgrid(np.arange(n_r), np.arange(n_theta), indexing='ij')
    j, i = j.ravel(), i.ravel()
    a, b = idx(j, i), idx(j, i + 1)
    c, d = idx(j + 1, i + 1), idx(j + 1, i)
    triangles = np.empty((2 * a.size, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([a, c, b])
    triangles[1::2] = np.column_stack([a, d, c])

    # Domain on the left of every boundary edge: outer loop CCW, inner loop CW
    ring = np.arange(n_theta)
    outer_edges = np.column_stack([idx(n_r, ring), idx(n_r, ring + 1),
                                   np.full(n_theta, OUTER_FIXED)])
    inner_edges = np.column_stack([idx(0, ring + 1), idx(0, ring),
                                   np.full(n_theta, INNER_FREE)])
    boundary_edges = np.vstack([outer_edges, inner_edges])

    markers = np.full(nodes.shape[0], INTERIOR, dtype=np.int64)
    markers[idx(0, ring)] = INNER_FREE
    markers[idx(n_r, ring)] = OUTER_FIXED

    mesh = TriMesh(nodes, triangles, boundary_edges, markers)
    validate_mesh(mesh)
    logger.debug("Generated annulus mesh: %d nodes, %d triangles",
                 mesh.n_nodes, mesh.n_triangles)
    return mesh


def annulus_for_case(case: str, n_theta: int, n_r: int) -> TriMesh:
    """Initial mesh of a named experiment."""
    return generate_annulus_mesh(case_inner_curve(case), OUTER_RADIUS, n_theta, n_r)


def _edge_keys(edges: np.ndarray, n_nodes: int) -> np.ndarray:
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    return lo * n_nodes + hi


def _triangle_edges(mesh: TriMesh) -> np.ndarray:
    """(3*n_t, 2) edges in triangle order: (v0,v1), (v1,v2), (v2,v0) per triangle."""
    t = mesh.triangles
    return np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)


def unique_edges(mesh: TriMesh) -> np.ndarray:
    """All distinct edges, sorted by key, each as (lo, hi)."""
    keys = np.unique(_edge_keys(_triangle_edges(mesh), mesh.n_nodes))
    return np.column_stack([keys // mesh.n_nodes, keys % mesh.n_nodes])


def edge_lengths(mesh: TriMesh) -> np.ndarray:
    e = unique_edges(mesh)
    return np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)


def min_edge_length(mesh: TriMesh) -> float:
    return float(edge_lengths(mesh).min())


def adjacency(mesh: TriMesh) -> sparse.csr_matrix:
    """Symmetric node adjacency matrix (ones on mesh edges)."""
    e = unique_edges(mesh)
    n = mesh.n_nodes
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


def area_epsilon(mesh: TriMesh) -> float:
    """Scale-invariant degeneracy threshold for triangle areas."""
    span = mesh.nodes.max(axis=0) - mesh.nodes.min(axis=0)
    return AREA_EPSILON_FACTOR * float(span[0] * span[1]) / mesh.n_triangles


def boundary_edge_triangles(mesh: TriMesh) -> np.ndarray:
    """
    Triangle owning each boundary edge.

    Returns:
        (n_b,) triangle indices; -1 where the edge is not a triangle edge
    """
    keys = _edge_keys(_triangle_edges(mesh), mesh.n_nodes)
    order = np.argsort(keys, kind='stable')
    sorted_keys = keys[order]
    bkeys = _edge_keys(mesh.boundary_edges[:, :2], mesh.n_nodes)
    pos = np.searchsorted(sorted_keys, bkeys)
    pos = np.minimum(pos, sorted_keys.size - 1)
    found = sorted_keys[pos] == bkeys
    return np.where(found, order[pos] // 3, -1)


def _ordered_loop(edges: np.ndarray, label: str) -> np.ndarray:
    """Walk a set of edges that must form one closed simple loop."""
    if edges.shape[0] < 3:
        raise MeshValidationError(f"{label} boundary has fewer than 3 edges")
    neighbours = {}
    for a, b in edges:
        neighbours.setdefault(int(a), []).append(int(b))
        neighbours.setdefault(int(b), []).append(int(a))
    if any(len(v) != 2 for v in neighbours.values()):
        raise MeshValidationError(f"{label} boundary is not a simple loop")
    start = min(neighbours)
    loop = [start]
    prev, cur = start, min(neighbours[start])
    while cur != start:
        loop.append(cur)
        a, b = neighbours[cur]
        prev, cur = cur, (b if a == prev else a)
        if len(loop) > len(neighbours):
            raise MeshValidationError(f"{label} boundary is not a simple loop")
    if len(loop) != len(neighbours):
        raise MeshValidationError(f"{label} boundary has more than one loop")
    return np.array(loop, dtype=np.int64)


def _ccw_loop(mesh: TriMesh, marker: int, label: str) -> np.ndarray:
    loop = _ordered_loop(mesh.edges_with_marker(marker), label)
    p = mesh.nodes[loop]
    q = np.roll(p, -1, axis=0)
    if np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]) < 0:
        loop = np.concatenate([loop[:1], loop[1:][::-1]])
    return loop


def inner_loop(mesh: TriMesh) -> np.ndarray:
    """INNER_FREE nodes in counterclockwise loop order, starting at the lowest id."""
    return _ccw_loop(mesh, INNER_FREE, "inner")


def validate_mesh(mesh: TriMesh):
    """
    Check every TriMesh invariant.

    Raises:
        MeshValidationError: on the first violated invariant
    """
    n = mesh.n_nodes
    if mesh.n_triangles == 0:
        raise MeshValidationError("mesh has no triangles")
    if mesh.triangles.min() < 0 or mesh.triangles.max() >= n:
        raise MeshValidationError("triangle references a missing node")
    if mesh.node_markers.shape[0] != n:
        raise MeshValidationError("node_markers length differs from node count")

    if not np.all(np.isfinite(mesh.nodes)):
        bad = int(np.flatnonzero(~np.isfinite(mesh.nodes).all(axis=1))[0])
        raise MeshValidationError(f"node {bad} has a non-finite coordinate")

    areas = mesh.signed_areas()
    if not np.all(areas > 0):
        bad = int(np.flatnonzero(~(areas > 0))[0])
        raise MeshValidationError(
            f"triangle {bad} has non-positive (negative) area {areas[bad]:.3e}")

    markers = mesh.boundary_edges[:, 2]
    if not np.all(np.isin(markers, [OUTER_FIXED, INNER_FREE])):
        raise MeshValidationError("boundary edge marker must be 1 (outer) or 2 (inner)")

    keys, counts = np.unique(_edge_keys(_triangle_edges(mesh), n), return_counts=True)
    if np.any(counts > 2):
        raise MeshValidationError("an edge is shared by more than two triangles")
    bkeys = _edge_keys(mesh.boundary_edges[:, :2], n)
    if np.unique(bkeys).size != bkeys.size:
        raise MeshValidationError("duplicate boundary edge")
    free_keys = keys[counts == 1]
    if not np.array_equal(np.sort(bkeys), free_keys):
        raise MeshValidationError(
            "boundary edges must be exactly the edges that belong to one triangle")

    _ordered_loop(mesh.edges_with_marker(OUTER_FIXED), "outer")
    _ordered_loop(mesh.edges_with_marker(INNER_FREE), "inner")

    expected = np.full(n, INTERIOR, dtype=np.int64)
    for marker in (OUTER_FIXED, INNER_FREE):
        expected[mesh.edges_with_marker(marker).ravel()] = marker
    if not np.array_equal(expected, mesh.node_markers):
        bad = int(np.flatnonzero(expected != mesh.node_markers)[0])
        raise MeshValidationError(
            f"node {bad} marker {mesh.node_markers[bad]} inconsistent with boundary edges")


def deform_mesh(mesh: TriMesh, d: DisplacementField, h: float) -> TriMesh:
    """
    Move every node to node_i - h * d_i.

    Raises:
        StepTooLarge: if any triangle area drops to area_epsilon or below
    """
    if h < 0:
        raise ValueError(f"step must be nonnegative, got {h}")
    d = np.asarray(d, dtype=float)
    if d.shape != mesh.nodes.shape:
        raise ValueError(f"displacement shape {d.shape} does not match nodes {mesh.nodes.shape}")
    if h == 0:
        return mesh
    moved = mesh.with_nodes(mesh.nodes - h * d)
    areas = moved.signed_areas()
    eps = area_epsilon(mesh)
    if not np.all(np.isfinite(areas)) or areas.min() <= eps:
        raise StepTooLarge(
            f"step h={h:.3e} leaves min triangle area {np.nanmin(areas):.3e} <= {eps:.3e}")
    return moved


def triangle_qualities(mesh: TriMesh) -> np.ndarray:
    """2 * inradius / circumradius per triangle (1 for equilateral)."""
    p = mesh.nodes[mesh.triangles]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    area = mesh.signed_areas()
    return 16.0 * area ** 2 / ((a + b + c) * a * b * c)


def mesh_quality(mesh: TriMesh) -> float:
    return float(triangle_qualities(mesh).min())


def boundary_normals(mesh: TriMesh) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nodal outward normals and lumped boundary measures.

    Edge normals point away from the owning triangle's third vertex; the
    nodal normal is the normalized sum of the two adjacent unit edge normals
    (angle bisector) and the measure is half the two adjacent edge lengths.

    Returns:
        (normals (n_v, 2), measures (n_v,)), zero on interior nodes
    """
    edges = mesh.boundary_edges[:, :2]
    owners = boundary_edge_triangles(mesh)
    pa, pb = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
    tangent = pb - pa
    length = np.linalg.norm(tangent, axis=1)
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / length[:, None]

    tri = mesh.triangles[owners]
    third = tri.sum(axis=1) - edges[:, 0] - edges[:, 1]
    inward = mesh.nodes[third] - pa
    flip = np.einsum('ij,ij->i', inward, normal) > 0
    normal[flip] *= -1.0

    normals = np.zeros_like(mesh.nodes)
    measures = np.zeros(mesh.n_nodes)
    for k in (0, 1):
        np.add.at(normals, edges[:, k], normal)
        np.add.at(measures, edges[:, k], 0.5 * length)
    norm = np.linalg.norm(normals, axis=1)
    on_boundary = norm > 0
    normals[on_boundary] /= norm[on_boundary, None]
    return normals, measures


def inner_perimeter(mesh: TriMesh) -> float:
    e = mesh.edges_with_marker(INNER_FREE)
    return float(np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1).sum())


def inner_radii(mesh: TriMesh) -> np.ndarray:
    return np.linalg.norm(mesh.nodes[inner_loop(mesh)], axis=1)


def mean_inner_radius(mesh: TriMesh) -> float:
    return float(inner_radii(mesh).mean())


def radius_rms_error(mesh: TriMesh, target_radius: float = TARGET_RADIUS) -> float:
    r = inner_radii(mesh)
    return float(np.sqrt(np.mean((r - target_radius) ** 2)))
