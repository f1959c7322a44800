"""
Optimizer - H1-regularized shape gradient descent with Armijo backtracking.

Each iteration solves the state and adjoint problems, builds the boundary
density and turns it into a displacement field d. The Armijo slope of d
comes from the nodal distributed gradient. The mesh moves by
Omega_{k+1} = (Id - h_k d_k) Omega_k.
"""

import logging
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from config.settings import (
    GRADIENT_RECOVERY, MAX_BACKTRACKS, MESH_QUALITY_FLOOR, OUTER_FIXED, SOLVER_TOLERANCE,
    STAGNATION_FACTOR,
)
from src.errors import LineSearchFailed, MeshQualityAbort, SolverBreakdown, StepTooLarge
from src.fields import AnalyticField, ZeroField, manufactured_force, target_velocity
from src.mesh import (
    annulus_for_case, deform_mesh, mean_inner_radius, mesh_quality, min_edge_length,
)
from src.mesh_loader import load_mesh
from src.models import (
    BoundaryDensity, DisplacementField, FlowField, IterationRecord, OptConfig, OptState, TriMesh,
)
from src.report_generator import ReportGenerator
from src.shape_calculus import (
    boundary_gradient_density, bump_field, distributed_gradient, gradient_check,
    normal_field, radial_field,
)
from src.stokes_fem import (
    ElementGeometry, compute_cost, relative_residual, solve_adjoint, solve_state,
)

logger = logging.getLogger(__name__)


@dataclass
class ShapeProblem:
    """Viscosity and data of the tracking problem: body force, boundary data, target."""
    alpha: float
    f: AnalyticField
    g: AnalyticField
    y_d: AnalyticField

    @classmethod
    def manufactured(cls, alpha: float) -> 'ShapeProblem':
        """Swirl target with the force that makes it exact on the target annulus, g = 0."""
        return cls(alpha, manufactured_force(alpha), ZeroField(), target_velocity())

    def solve(self, mesh: TriMesh) -> Tuple[FlowField, float]:
        """State and cost on a mesh."""
        y = solve_state(mesh, self.alpha, self.f, self.g)
        return y, compute_cost(mesh, y, self.y_d)


def laplace_stiffness(mesh: TriMesh) -> sparse.csr_matrix:
    """P1 vector Laplacian int Dd:DV, ordering [d_x; d_y]."""
    geom = ElementGeometry.from_mesh(mesh)
    n, tri = mesh.n_nodes, mesh.triangles
    local = geom.areas[:, None, None] * np.einsum('tid,tjd->tij', geom.grads, geom.grads)
    rows = np.broadcast_to(tri[:, :, None], local.shape)
    cols = np.broadcast_to(tri[:, None, :], local.shape)
    K = sparse.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()
    return sparse.block_diag([K, K], format='csr')


def density_load(mesh: TriMesh, density: BoundaryDensity) -> np.ndarray:
    """(n_v, 2) nodal load w_i s_i n_i of the functional V -> sum_i w_i s_i (V.n)_i."""
    load = np.zeros((mesh.n_nodes, 2))
    load[density.node_ids] = (density.values * density.measures)[:, None] * density.normals
    return load


def h1_riesz(mesh: TriMesh, load: np.ndarray) -> DisplacementField:
    """
    Solve int Dd:DV = sum_i load_i . V_i for all V vanishing on OUTER_FIXED.

    Raises:
        SolverBreakdown: if the solve misses the residual tolerance
    """
    n = mesh.n_nodes
    K = laplace_stiffness(mesh).tocsc()
    rhs = np.concatenate([load[:, 0], load[:, 1]])

    fixed = mesh.nodes_with_marker(OUTER_FIXED)
    free = np.ones(2 * n, dtype=bool)
    free[fixed] = False
    free[fixed + n] = False

    d = np.zeros(2 * n)
    if np.any(rhs[free] != 0.0):
        K_ff = K[free][:, free]
        d[free] = spsolve(K_ff, rhs[free])
        residual = relative_residual(K_ff, d[free], rhs[free])
        if not np.isfinite(residual) or residual > SOLVER_TOLERANCE:
            raise SolverBreakdown(f"descent solve residual {residual:.3e}", residual)
    return np.column_stack([d[:n], d[n:]])


def h1_direction(mesh: TriMesh, density: BoundaryDensity) -> DisplacementField:
    """H1 representative of the boundary density, d = 0 on OUTER_FIXED."""
    return h1_riesz(mesh, density_load(mesh, density))


def raw_normal_direction(mesh: TriMesh, density: BoundaryDensity) -> DisplacementField:
    """d = w n on the inner loop, zero elsewhere."""
    d = np.zeros((mesh.n_nodes, 2))
    d[density.node_ids] = density.values[:, None] * density.normals
    return d


def direction_norm(mesh: TriMesh, d: DisplacementField, method: str,
                   density: BoundaryDensity) -> float:
    """||d||_{H1} for 'h1' (energy seminorm), sqrt(sum w^2 s) for 'raw_normal'."""
    if method == "h1":
        flat = np.concatenate([d[:, 0], d[:, 1]])
        return float(np.sqrt(max(flat @ (laplace_stiffness(mesh) @ flat), 0.0)))
    return float(np.sqrt(np.sum(density.values ** 2 * density.measures)))


def descent_direction(
    mesh: TriMesh,
    alpha: float,
    y: FlowField,
    v: FlowField,
    f: AnalyticField,
    g: AnalyticField,
    y_d: AnalyticField,
    method: str = "h1",
    recovery: str = GRADIENT_RECOVERY
) -> DisplacementField:
    """
    Displacement field representing the shape gradient.

    Args:
        y, v: State and adjoint (with their pressures) on mesh
        method: 'h1' (vector Laplacian regularization) or 'raw_normal'

    Returns:
        (n_v, 2) field, zero on OUTER_FIXED nodes
    """
    density = boundary_gradient_density(mesh, alpha, y, v, g, y_d, recovery, f)
    return direction_from_density(mesh, density, method)


def direction_from_density(mesh: TriMesh, density: BoundaryDensity, method: str) -> DisplacementField:
    if method == "h1":
        return h1_direction(mesh, density)
    if method == "raw_normal":
        return raw_normal_direction(mesh, density)
    raise ValueError(f"Unknown descent method: {method}")


def checked_direction(
    mesh: TriMesh,
    density: BoundaryDensity,
    gradient: np.ndarray,
    method: str
) -> Tuple[DisplacementField, float, float]:
    """
    Direction from the density, its norm and the slope dJ(Omega; d) = sum_i r_i . d_i.

    r is the nodal gradient of the distributed form. When the density
    direction is not a descent direction for r, the H1 representative of r
    is used instead; its slope equals its squared norm.

    Returns:
        (d, norm, slope)
    """
    d = direction_from_density(mesh, density, method)
    slope = float(np.sum(gradient * d))
    if slope > 0.0:
        return d, direction_norm(mesh, d, method, density), slope

    logger.warning("Density direction has slope %.3e; using the H1 representative "
                   "of the distributed gradient", slope)
    d = h1_riesz(mesh, gradient)
    slope = float(np.sum(gradient * d))
    return d, float(np.sqrt(max(slope, 0.0))), slope


def armijo_step(
    state: OptState,
    d: DisplacementField,
    slope: float,
    problem: ShapeProblem,
    step_cap: float,
    armijo_c: float,
    max_backtracks: int = MAX_BACKTRACKS
) -> Tuple[float, TriMesh, FlowField, float]:
    """
    Backtracking line search along -d.

    The first trial moves no node by more than step_cap times the minimum
    edge length. A trial is accepted when
        J((Id - h d) Omega) <= J(Omega) - c h dJ(Omega; d).

    Args:
        state: Current iterate (mesh and cost)
        d: Descent field
        slope: dJ(Omega; d)

    Returns:
        (h, new mesh, new state, new cost)

    Raises:
        LineSearchFailed: after max_backtracks halvings
    """
    d_max = float(np.linalg.norm(d, axis=1).max())
    if d_max == 0.0:
        raise ValueError("descent direction is zero")
    h = step_cap * min_edge_length(state.mesh) / d_max

    for trial in range(max_backtracks + 1):
        try:
            trial_mesh = deform_mesh(state.mesh, d, h)
        except StepTooLarge as e:
            logger.debug("Trial %d: h=%.3e rejected (%s)", trial, h, e)
            h *= 0.5
            continue
        y, cost = problem.solve(trial_mesh)
        target = state.cost - armijo_c * h * slope
        logger.debug("Trial %d: h=%.3e J=%.12e target=%.12e", trial, h, cost, target)
        if cost <= target:
            return h, trial_mesh, y, cost
        h *= 0.5

    raise LineSearchFailed(f"no sufficient decrease after {max_backtracks} backtracks")


def initial_mesh(config: OptConfig) -> TriMesh:
    if config.case.startswith("file:"):
        return load_mesh(config.case[len("file:"):])
    return annulus_for_case(config.case, config.n_theta, config.n_r)


def default_perturbations(mesh: TriMesh):
    return {'radial': radial_field(mesh), 'normal': normal_field(mesh), 'bump': bump_field(mesh)}


def optimize(config: OptConfig, report: Optional[ReportGenerator] = None) -> OptState:
    """
    Run the descent loop until max_iters, grad_tol, stagnation or line-search failure.

    Args:
        config: Experiment parameters
        report: Artifact writer; one for config.output_dir is created if None

    Returns:
        Final OptState with the complete history

    Raises:
        MeshQualityAbort: if an accepted mesh has quality below MESH_QUALITY_FLOOR
    """
    if report is None:
        report = ReportGenerator(config.output_dir, config.emit_vtk)
    report.prepare()

    problem = ShapeProblem.manufactured(config.alpha)
    start = time.perf_counter()
    mesh = initial_mesh(config)

    if config.fd_check:
        table = gradient_check(mesh, config.alpha, default_perturbations(mesh),
                               problem.f, problem.g, problem.y_d, config.fd_step, config.recovery)
        report.write_gradient_check(table)

    y, cost = problem.solve(mesh)
    opt = OptState(mesh=mesh, cost=cost, state=y)
    j0 = cost
    d0_norm = None

    while True:
        v = solve_adjoint(opt.mesh, config.alpha, opt.state, problem.y_d)
        density = boundary_gradient_density(opt.mesh, config.alpha, opt.state, v,
                                            problem.g, problem.y_d, config.recovery, problem.f)
        gradient = distributed_gradient(opt.mesh, config.alpha, opt.state, v,
                                        problem.f, problem.g, problem.y_d)
        d, norm, slope = checked_direction(opt.mesh, density, gradient, config.descent)
        opt.adjoint, opt.direction = v, d
        if d0_norm is None:
            d0_norm = norm

        record = IterationRecord(opt.k, opt.cost, norm, opt.step, mesh_quality(opt.mesh),
                                 mean_inner_radius(opt.mesh), time.perf_counter() - start)
        opt.history.append(record)
        report.write_iterate(opt.k, opt.mesh, opt.state)
        logger.info("iter %3d  J=%.10e  |d|=%.4e  h=%.3e  q=%.4f  r=%.5f",
                    record.k, record.cost, record.grad_norm, record.step,
                    record.mesh_quality, record.mean_inner_radius)

        reason = _stop_reason(opt, config, norm, d0_norm, j0)
        if reason:
            break

        try:
            h, mesh, y, cost = armijo_step(opt, d, slope, problem,
                                           config.step_cap, config.armijo_c)
        except LineSearchFailed as e:
            logger.warning("Line search failed at iteration %d: %s", opt.k, e)
            reason = "line_search_failed"
            break

        quality = mesh_quality(mesh)
        if quality < MESH_QUALITY_FLOOR:
            report.dump_failed_mesh(mesh)
            report.write_history(opt.history)
            raise MeshQualityAbort(
                f"mesh quality {quality:.4f} below {MESH_QUALITY_FLOOR} after iteration {opt.k}",
                quality)

        opt.mesh, opt.state, opt.cost, opt.step = mesh, y, cost, h
        opt.k += 1

    opt.stop_reason = reason
    report.write_history(opt.history)
    report.write_final_boundary(opt.mesh)
    report.write_density(opt.mesh, density)
    logger.info("Stopped after %d iterations: %s", opt.k, reason)
    return opt


def _stop_reason(opt: OptState, config: OptConfig, norm: float, d0_norm: float, j0: float) -> str:
    if norm == 0.0 or norm < config.grad_tol * d0_norm:
        return "grad_tol"
    if len(opt.history) >= 2:
        change = abs(opt.history[-1].cost - opt.history[-2].cost)
        if change < STAGNATION_FACTOR * j0:
            return "stagnation"
    if opt.k >= config.max_iters:
        return "max_iters"
    return ""
