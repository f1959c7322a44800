"""
Shape Calculus - Eulerian derivative of the tracking cost.

Three evaluations of dJ(Omega; V) for a perturbation T_t = Id + tV:
  * boundary form: sum_i w_i s_i (V.n)_i with w = 1/2|y - y_d|^2 + alpha D(y-g):Dv
  * distributed form: sum_i r_i . V_i, r the t-derivative of the transported
    discrete Lagrangian with respect to the node positions
  * finite differences: central difference of J on transported meshes
"""

import logging
from typing import Dict, Optional

import numpy as np
import pandas as pd

from config.settings import FLOAT_FORMAT, GRADIENT_RECOVERY, INNER_FREE, OUTER_FIXED
from src.errors import OriginEvaluation
from src.fields import AnalyticField
from src.mesh import (
    adjacency, boundary_edge_triangles, boundary_normals, deform_mesh, inner_loop,
)
from src.models import BoundaryDensity, FlowField, PerturbationField, TriMesh
from src.stokes_fem import (
    ElementGeometry, QUAD_BARY, adjoint_system, boundary_reaction, compute_cost,
    evaluate_at_quadrature, jacobian_at_quadrature, nodal_velocity_gradients,
    pressure_at_quadrature, solve_adjoint, solve_state, state_system, velocity_at_quadrature,
    velocity_gradient_at_quadrature,
)
from src.utils import relative_difference

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Boundary form
# ---------------------------------------------------------------------------

def recover_gradients(mesh: TriMesh, values: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """
    Nodal gradients of a P1 vector field by least-squares quadratic fits.

    Each node's patch is its two-ring neighbourhood; coordinates are
    centred at the node and scaled by the patch radius before fitting.

    Args:
        values: (n_v, 2) nodal values
        nodes: node indices to recover at

    Returns:
        (len(nodes), 2, 2) gradients, [:, i, j] = d u_i / d x_j
    """
    A = adjacency(mesh)
    two_ring = (A + A @ A).tocsr()
    out = np.empty((len(nodes), 2, 2))
    for k, i in enumerate(nodes):
        patch = np.union1d(two_ring.indices[two_ring.indptr[i]:two_ring.indptr[i + 1]], [i])
        local = mesh.nodes[patch] - mesh.nodes[i]
        scale = np.abs(local).max()
        xi, eta = local[:, 0] / scale, local[:, 1] / scale
        if patch.size >= 6:
            basis = np.column_stack([np.ones_like(xi), xi, eta, xi ** 2, xi * eta, eta ** 2])
        else:
            basis = np.column_stack([np.ones_like(xi), xi, eta])
        coeffs, *_ = np.linalg.lstsq(basis, values[patch], rcond=None)
        out[k] = coeffs[1:3].T / scale
    return out


def _element_products(mesh: TriMesh, y: FlowField, v: FlowField,
                      g: AnalyticField, loop: np.ndarray) -> np.ndarray:
    """Edge-length-weighted average of (Dy_T - Dg(x_i)):Dv_T over the adjacent boundary triangles."""
    geom = ElementGeometry.from_mesh(mesh)
    dy_t = nodal_velocity_gradients(mesh, geom, y)
    dv_t = nodal_velocity_gradients(mesh, geom, v)
    inner = mesh.boundary_edges[:, 2] == INNER_FREE
    edges = mesh.boundary_edges[inner, :2]
    owners = boundary_edge_triangles(mesh)[inner]
    lengths = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
    dg = g.jacobian(mesh.nodes)

    products = np.zeros(mesh.n_nodes)
    weight = np.zeros(mesh.n_nodes)
    for k in (0, 1):
        node = edges[:, k]
        local = np.einsum('ecd,ecd->e', dy_t[owners] - dg[node], dv_t[owners])
        np.add.at(products, node, lengths * local)
        np.add.at(weight, node, lengths)
    return products[loop] / weight[loop]


def _flux_products(mesh: TriMesh, alpha: float, y: FlowField, v: FlowField,
                   f: AnalyticField, g: AnalyticField, y_d: AnalyticField,
                   loop: np.ndarray, normals: np.ndarray, measures: np.ndarray) -> np.ndarray:
    """
    alpha D(y-g):Dv from the discrete boundary reactions of the state and adjoint.

    With y = g and v = 0 on the boundary and div v = 0, both gradients reduce
    to their tangential normal-derivative components, where the pressure drops out.
    """
    r_y = boundary_reaction(state_system(mesh, alpha, f, g), y)[loop]
    r_v = boundary_reaction(adjoint_system(mesh, alpha, y, y_d), v)[loop]
    tangents = np.column_stack([-normals[:, 1], normals[:, 0]])
    dg_n = np.einsum('icd,id->ic', g.jacobian(mesh.nodes[loop]), normals)
    dy_t = (np.einsum('ic,ic->i', tangents, r_y) / (alpha * measures)
            - np.einsum('ic,ic->i', tangents, dg_n))
    dv_t = np.einsum('ic,ic->i', tangents, r_v) / measures
    return dy_t * dv_t


def boundary_gradient_density(
    mesh: TriMesh,
    alpha: float,
    y: FlowField,
    v: FlowField,
    g: AnalyticField,
    y_d: AnalyticField,
    recovery: str = GRADIENT_RECOVERY,
    f: Optional[AnalyticField] = None
) -> BoundaryDensity:
    """
    Shape-gradient density w on the free boundary.

    Args:
        y: State from solve_state
        v: Adjoint from solve_adjoint
        recovery: 'flux' (boundary reactions), 'patch' (quadratic patch fit)
            or 'element' (boundary triangles)
        f: Body force of the state problem, required by 'flux'

    Returns:
        BoundaryDensity over the INNER_FREE nodes in loop order
    """
    loop = inner_loop(mesh)
    normals, measures = boundary_normals(mesh)
    x = mesh.nodes[loop]

    misfit = y.velocity_nodal[loop] - y_d(x)
    w = 0.5 * np.einsum('ij,ij->i', misfit, misfit)

    if recovery == "flux":
        if f is None:
            raise ValueError("flux recovery needs the body force f")
        w = w + _flux_products(mesh, alpha, y, v, f, g, y_d, loop,
                               normals[loop], measures[loop])
    elif recovery == "patch":
        dy = recover_gradients(mesh, y.velocity_nodal, loop)
        dv = recover_gradients(mesh, v.velocity_nodal, loop)
        w = w + alpha * np.einsum('ijk,ijk->i', dy - g.jacobian(x), dv)
    elif recovery == "element":
        w = w + alpha * _element_products(mesh, y, v, g, loop)
    else:
        raise ValueError(f"Unknown gradient recovery: {recovery}")

    return BoundaryDensity(loop, w, measures[loop], normals[loop])


def boundary_pairing(density: BoundaryDensity, mesh: TriMesh, V: PerturbationField) -> float:
    """Sum_i w_i s_i (V.n)_i."""
    V = np.asarray(V, dtype=float)
    if V.shape != (mesh.n_nodes, 2):
        raise ValueError(f"perturbation shape {V.shape} does not match {mesh.n_nodes} nodes")
    return density.pairing(V)


# ---------------------------------------------------------------------------
# Distributed form
# ---------------------------------------------------------------------------

def _trace(M: np.ndarray) -> np.ndarray:
    return M[..., 0, 0] + M[..., 1, 1]


def distributed_gradient(
    mesh: TriMesh,
    alpha: float,
    y: FlowField,
    v: FlowField,
    f: AnalyticField,
    g: AnalyticField,
    y_d: AnalyticField
) -> np.ndarray:
    """
    Nodal representation r of the volume expression, dJ(Omega; V) = sum_i r_i . V_i.

    y and v carry the state and adjoint pressures p and q. V enters through
    its P1 interpolant, so DV is constant per triangle and the integrand is
    S:DV + b.V at each quadrature point with
        S = s I + alpha (Dy^T Dv + Dv^T Dy) - p Dv^T - q Dy^T
        s = 1/2|y - y_d|^2 - alpha Dy:Dv + p div v + q div y + f.v
        b = -Dy_d^T (y - y_d) + Df^T v
    The boundary-data term adds -Dg^T mu at the Dirichlet nodes, mu being
    the adjoint boundary reaction.

    Returns:
        (n_v, 2) array
    """
    geom = ElementGeometry.from_mesh(mesh)
    weights = geom.quad_weights

    Y = velocity_at_quadrature(mesh, geom, y)
    DY = velocity_gradient_at_quadrature(mesh, geom, y)
    W = velocity_at_quadrature(mesh, geom, v)
    DW = velocity_gradient_at_quadrature(mesh, geom, v)
    P = pressure_at_quadrature(mesh, y.pressure_nodal)
    Q = pressure_at_quadrature(mesh, v.pressure_nodal)

    misfit = Y - evaluate_at_quadrature(geom, y_d)
    F = evaluate_at_quadrature(geom, f)

    scalar = (0.5 * np.einsum('tqc,tqc->tq', misfit, misfit)
              - alpha * np.einsum('tqcd,tqcd->tq', DY, DW)
              + P * _trace(DW) + Q * _trace(DY)
              + np.einsum('tqc,tqc->tq', F, W))
    DYt, DWt = DY.swapaxes(-1, -2), DW.swapaxes(-1, -2)
    S = (scalar[..., None, None] * np.eye(2)
         + alpha * (DYt @ DW + DWt @ DY)
         - P[..., None, None] * DWt - Q[..., None, None] * DYt)
    b = (np.einsum('tqcd,tqc->tqd', jacobian_at_quadrature(geom, f), W)
         - np.einsum('tqcd,tqc->tqd', jacobian_at_quadrature(geom, y_d), misfit))

    S_bar = np.einsum('tq,tqcd->tcd', weights, S)
    local = (np.einsum('tcd,tid->tic', S_bar, geom.grads)
             + np.einsum('tq,qi,tqc->tic', weights, QUAD_BARY, b))
    r = np.zeros((mesh.n_nodes, 2))
    np.add.at(r, mesh.triangles, local)

    boundary = mesh.boundary_nodes()
    dg = g.jacobian(mesh.nodes[boundary])
    if np.any(dg != 0.0):
        mu = boundary_reaction(adjoint_system(mesh, alpha, y, y_d), v)
        r[boundary] -= np.einsum('icd,ic->id', dg, mu[boundary])
    return r


def distributed_shape_derivative(
    mesh: TriMesh,
    alpha: float,
    y: FlowField,
    v: FlowField,
    V: PerturbationField,
    f: AnalyticField,
    g: AnalyticField,
    y_d: AnalyticField
) -> float:
    """Volume expression of dJ(Omega; V), paired from distributed_gradient."""
    V = np.asarray(V, dtype=float)
    if V.shape != (mesh.n_nodes, 2):
        raise ValueError(f"perturbation shape {V.shape} does not match {mesh.n_nodes} nodes")
    return float(np.sum(distributed_gradient(mesh, alpha, y, v, f, g, y_d) * V))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def transported_cost(mesh: TriMesh, alpha: float, V: PerturbationField, t: float,
                     f: AnalyticField, g: AnalyticField, y_d: AnalyticField) -> float:
    """J on T_t(Omega) with node_i <- node_i + t V_i (t may be negative)."""
    moved = deform_mesh(mesh, -V, t) if t >= 0 else deform_mesh(mesh, V, -t)
    return compute_cost(moved, solve_state(moved, alpha, f, g), y_d)


def fd_shape_derivative(
    mesh: TriMesh,
    alpha: float,
    V: PerturbationField,
    f: AnalyticField,
    g: AnalyticField,
    y_d: AnalyticField,
    t: float
) -> float:
    """
    Central difference [J(T_t Omega) - J(T_-t Omega)] / 2t.

    Raises:
        StepTooLarge: if either transported mesh degenerates
        SolverBreakdown: if a transported solve fails
    """
    if t <= 0:
        raise ValueError(f"finite-difference step must be positive, got {t}")
    V = np.asarray(V, dtype=float)
    plus = transported_cost(mesh, alpha, V, t, f, g, y_d)
    minus = transported_cost(mesh, alpha, V, -t, f, g, y_d)
    return (plus - minus) / (2.0 * t)


def gradient_check(
    mesh: TriMesh,
    alpha: float,
    fields: Dict[str, PerturbationField],
    f: AnalyticField,
    g: AnalyticField,
    y_d: AnalyticField,
    t: float,
    recovery: str = GRADIENT_RECOVERY
) -> pd.DataFrame:
    """
    Three-way comparison of boundary form, distributed form and FD oracle.

    Returns:
        One row per field with the three values and pairwise relative differences
    """
    y = solve_state(mesh, alpha, f, g)
    v = solve_adjoint(mesh, alpha, y, y_d)
    density = boundary_gradient_density(mesh, alpha, y, v, g, y_d, recovery, f)
    r = distributed_gradient(mesh, alpha, y, v, f, g, y_d)

    rows = []
    for name, V in fields.items():
        b = boundary_pairing(density, mesh, V)
        d = float(np.sum(r * np.asarray(V, dtype=float)))
        fd = fd_shape_derivative(mesh, alpha, V, f, g, y_d, t)
        rows.append({
            'field': name,
            'boundary': b,
            'distributed': d,
            'fd': fd,
            'boundary_vs_fd': relative_difference(b, fd),
            'distributed_vs_fd': relative_difference(d, fd),
            'boundary_vs_distributed': relative_difference(b, d),
        })
        logger.info("Gradient check %-12s boundary=% .6e distributed=% .6e fd=% .6e",
                    name, b, d, fd)
    return pd.DataFrame(rows)


def taylor_table(mesh: TriMesh, alpha: float, V: PerturbationField,
                 f: AnalyticField, g: AnalyticField, y_d: AnalyticField,
                 t: float, levels: int = 3) -> pd.DataFrame:
    """
    FD derivatives at t, t/2, t/4, ... with successive deviations and their ratios.

    For a smooth cost the deviations shrink like t^2, so ratios approach 4.
    """
    steps = t / 2.0 ** np.arange(levels)
    values = np.array([fd_shape_derivative(mesh, alpha, V, f, g, y_d, s) for s in steps])
    deviation = np.append(np.abs(np.diff(values)), np.nan)
    ratio = np.full(levels, np.nan)
    ratio[1:-1] = deviation[:-2] / np.where(deviation[1:-1] > 0, deviation[1:-1], np.nan)
    return pd.DataFrame({'t': steps, 'fd': values, 'deviation': deviation, 'ratio': ratio})


# ---------------------------------------------------------------------------
# Perturbation fields
# ---------------------------------------------------------------------------

def _decay(mesh: TriMesh) -> np.ndarray:
    """Radial weight equal to 1 at the innermost node and 0 on the outer circle."""
    r = np.linalg.norm(mesh.nodes, axis=1)
    if np.any(r < 1e-12):
        raise OriginEvaluation("perturbation field evaluated at the origin")
    outer = r[mesh.nodes_with_marker(OUTER_FIXED)].mean()
    inner = r[mesh.nodes_with_marker(INNER_FREE)].min()
    return np.clip((outer - r) / (outer - inner), 0.0, None)


def _finish(mesh: TriMesh, V: np.ndarray) -> PerturbationField:
    V[mesh.nodes_with_marker(OUTER_FIXED)] = 0.0
    return V


def radial_field(mesh: TriMesh) -> PerturbationField:
    """Outward radial field x/r, decaying linearly to zero on the outer circle."""
    r = np.linalg.norm(mesh.nodes, axis=1)
    psi = _decay(mesh)
    return _finish(mesh, psi[:, None] * mesh.nodes / r[:, None])


def bump_field(mesh: TriMesh) -> PerturbationField:
    """Radial field modulated by 1 + 0.5 cos(2 theta) + 0.3 sin(3 theta)."""
    theta = np.arctan2(mesh.nodes[:, 1], mesh.nodes[:, 0])
    scale = 1.0 + 0.5 * np.cos(2.0 * theta) + 0.3 * np.sin(3.0 * theta)
    return _finish(mesh, scale[:, None] * radial_field(mesh))


def normal_field(mesh: TriMesh) -> PerturbationField:
    """
    Unit outward normal of Omega on the inner loop, extended over the rest
    of the domain by a decaying radial field pointing towards the origin.
    """
    V = -radial_field(mesh)
    loop = inner_loop(mesh)
    normals, _ = boundary_normals(mesh)
    V[loop] = normals[loop]
    return _finish(mesh, V)


def tangential_field(mesh: TriMesh) -> PerturbationField:
    """
    Unit tangent (rotated nodal normal) on the inner loop, decaying rotation
    elsewhere. V.n is exactly zero at every inner node.
    """
    r = np.linalg.norm(mesh.nodes, axis=1)
    psi = _decay(mesh)
    V = psi[:, None] * np.column_stack([-mesh.nodes[:, 1], mesh.nodes[:, 0]]) / r[:, None]
    loop = inner_loop(mesh)
    normals, _ = boundary_normals(mesh)
    V[loop] = np.column_stack([-normals[loop, 1], normals[loop, 0]])
    return _finish(mesh, V)


def density_frame(mesh: TriMesh, density: BoundaryDensity) -> pd.DataFrame:
    x = mesh.nodes[density.node_ids]
    return pd.DataFrame({
        'node_id': density.node_ids + 1,
        'x': x[:, 0],
        'y': x[:, 1],
        'w': density.values,
        's': density.measures,
        'nx': density.normals[:, 0],
        'ny': density.normals[:, 1],
    })


def save_density_csv(path, mesh: TriMesh, density: BoundaryDensity):
    """Write node_id, x, y, w, s, nx, ny (1-based node ids)."""
    density_frame(mesh, density).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug("Saved boundary density to %s", path)
