"""
Stokes FEM - P1-bubble/P1 (MINI) discretization of the Stokes state and
adjoint problems, and quadrature of the tracking cost.

Global unknown ordering: [u_x (n_v), u_y (n_v), p (n_v), mean multiplier (1)].
The cubic bubble 27*l0*l1*l2 of each triangle is condensed out element by
element. With G_k = (int b) * d_k(lambda) and A_bb = alpha * int |grad b|^2,
the bubble rows A_bb c_k + G_k . p_T = F_bk give

    c_k = (F_bk - G_k . p_T) / A_bb

and the continuity rows gain -sum_k G_k G_k^T / A_bb in the pressure block
and -sum_k G_k F_bk / A_bb on the right-hand side. Nodal P1 and bubble
velocities do not couple in the viscous form.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import spsolve

from config.settings import COMPATIBILITY_TOLERANCE, SOLVER_TOLERANCE
from src.errors import CompatibilityViolated, SolverBreakdown
from src.fields import AnalyticField, ZeroField, manufactured_force, target_velocity
from src.mesh import annulus_for_case, boundary_edge_triangles, edge_lengths
from src.models import FlowField, TriMesh

logger = logging.getLogger(__name__)

# Degree-4 symmetric rule, 6 points (barycentric coordinates, weights sum to 1)
_A1, _B1, _W1 = 0.108103018168070, 0.445948490915965, 0.223381589678011
_A2, _B2, _W2 = 0.816847572980459, 0.091576213509771, 0.109951743655322
QUAD_BARY = np.array([
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
QUAD_WEIGHTS = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

BUBBLE_MASS = 9.0 / 20.0          # int b = 9|T|/20
BUBBLE_STIFFNESS = 81.0 / 20.0    # int |grad b|^2 = 81/20 |T| sum |grad l_i|^2

QUAD_BUBBLE = 27.0 * QUAD_BARY.prod(axis=1)
# d b / d lambda_i at the quadrature points: 27 * product of the other two
QUAD_BUBBLE_DBARY = 27.0 * np.column_stack([
    QUAD_BARY[:, 1] * QUAD_BARY[:, 2],
    QUAD_BARY[:, 0] * QUAD_BARY[:, 2],
    QUAD_BARY[:, 0] * QUAD_BARY[:, 1],
])


@dataclass
class ElementGeometry:
    """Per-triangle areas, barycentric gradients and quadrature points."""
    areas: np.ndarray          # (n_t,)
    grads: np.ndarray          # (n_t, 3, 2)
    points: np.ndarray         # (n_t, 6, 2)

    @classmethod
    def from_mesh(cls, mesh: TriMesh) -> 'ElementGeometry':
        p = mesh.nodes[mesh.triangles]
        areas = mesh.signed_areas()
        # grad l_i = perp(p_k - p_j) / 2A for (i, j, k) cyclic
        nxt, prv = p[:, [1, 2, 0]], p[:, [2, 0, 1]]
        diff = prv - nxt
        grads = np.stack([-diff[..., 1], diff[..., 0]], axis=-1) / (2.0 * areas[:, None, None])
        points = np.einsum('qi,tid->tqd', QUAD_BARY, p)
        return cls(areas, grads, points)

    @property
    def quad_weights(self) -> np.ndarray:
        """(n_t, 6) area-scaled quadrature weights."""
        return self.areas[:, None] * QUAD_WEIGHTS[None, :]

    def bubble_gradients(self) -> np.ndarray:
        """(n_t, 6, 2) gradient of the bubble at the quadrature points."""
        return np.einsum('qi,tid->tqd', QUAD_BUBBLE_DBARY, self.grads)


def evaluate_at_quadrature(geom: ElementGeometry, field: AnalyticField) -> np.ndarray:
    n_t = geom.points.shape[0]
    return field(geom.points.reshape(-1, 2)).reshape(n_t, 6, 2)


def jacobian_at_quadrature(geom: ElementGeometry, field: AnalyticField) -> np.ndarray:
    n_t = geom.points.shape[0]
    return field.jacobian(geom.points.reshape(-1, 2)).reshape(n_t, 6, 2, 2)


def velocity_at_quadrature(mesh: TriMesh, geom: ElementGeometry, flow: FlowField) -> np.ndarray:
    """(n_t, 6, 2) discrete velocity including the bubble part."""
    nodal = flow.velocity_nodal[mesh.triangles]                    # (n_t, 3, 2)
    values = np.einsum('qi,tid->tqd', QUAD_BARY, nodal)
    return values + QUAD_BUBBLE[None, :, None] * flow.velocity_bubble[:, None, :]


def nodal_velocity_gradients(mesh: TriMesh, geom: ElementGeometry, flow: FlowField) -> np.ndarray:
    """(n_t, 2, 2) gradient of the P1 part, constant per triangle."""
    nodal = flow.velocity_nodal[mesh.triangles]
    return np.einsum('tic,tid->tcd', nodal, geom.grads)


def velocity_gradient_at_quadrature(mesh: TriMesh, geom: ElementGeometry,
                                    flow: FlowField) -> np.ndarray:
    """(n_t, 6, 2, 2) full velocity gradient D u at the quadrature points."""
    nodal = nodal_velocity_gradients(mesh, geom, flow)
    bubble = np.einsum('tc,tqd->tqcd', flow.velocity_bubble, geom.bubble_gradients())
    return nodal[:, None] + bubble


def pressure_at_quadrature(mesh: TriMesh, pressure: np.ndarray) -> np.ndarray:
    return pressure[mesh.triangles] @ QUAD_BARY.T


@dataclass
class SaddleSystem:
    """
    Condensed MINI saddle-point system of one mesh.

    matrix/rhs are the unconstrained symmetric system; dirichlet_dofs and
    dirichlet_values hold the velocity constraints applied by solve(). The
    bubble_* arrays reconstruct the condensed bubble coefficients.
    """
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    n_nodes: int
    triangles: np.ndarray
    bubble_coupling: np.ndarray    # (n_t, 2, 3) G_k over the local pressures
    bubble_diagonal: np.ndarray    # (n_t,) A_bb
    bubble_load: np.ndarray        # (n_t, 2) F_bk

    @property
    def size(self) -> int:
        return self.rhs.size

    def velocity_block(self) -> sparse.csr_matrix:
        n2 = 2 * self.n_nodes
        return self.matrix[:n2, :n2]

    def divergence_block(self) -> sparse.csr_matrix:
        """B: pressure rows, velocity columns."""
        n = self.n_nodes
        return self.matrix[2 * n:3 * n, :2 * n]

    def constrain(self, dofs: np.ndarray, values: np.ndarray) -> 'SaddleSystem':
        self.dirichlet_dofs = np.asarray(dofs, dtype=np.int64)
        self.dirichlet_values = np.asarray(values, dtype=float)
        return self

    def solve(self) -> FlowField:
        """
        Eliminate the Dirichlet dofs symmetrically and solve directly.

        Raises:
            SolverBreakdown: if the relative residual exceeds SOLVER_TOLERANCE
        """
        free = np.ones(self.size, dtype=bool)
        free[self.dirichlet_dofs] = False
        x = np.zeros(self.size)
        x[self.dirichlet_dofs] = self.dirichlet_values

        A = self.matrix.tocsc()
        A_ff = A[free][:, free]
        b_f = self.rhs[free] - A[free][:, ~free] @ x[~free]

        with np.errstate(all='ignore'):
            x_f = spsolve(A_ff, b_f)
        residual = relative_residual(A_ff, x_f, b_f)
        logger.debug("Saddle solve: %d unknowns, relative residual %.3e",
                     x_f.size, residual)
        if not np.isfinite(residual) or residual > SOLVER_TOLERANCE:
            raise SolverBreakdown(
                f"relative residual {residual:.3e} exceeds {SOLVER_TOLERANCE:g}", residual)
        x[free] = x_f
        return self.unpack(x)

    def unpack(self, x: np.ndarray) -> FlowField:
        n = self.n_nodes
        velocity = np.column_stack([x[:n], x[n:2 * n]])
        pressure = x[2 * n:3 * n].copy()
        p_local = pressure[self.triangles]                                  # (n_t, 3)
        bubble = (self.bubble_load
                  - np.einsum('tki,ti->tk', self.bubble_coupling, p_local)) \
            / self.bubble_diagonal[:, None]
        return FlowField(velocity, bubble, pressure)

    def pack(self, flow: FlowField) -> np.ndarray:
        n = self.n_nodes
        x = np.zeros(self.size)
        x[:n] = flow.velocity_nodal[:, 0]
        x[n:2 * n] = flow.velocity_nodal[:, 1]
        x[2 * n:3 * n] = flow.pressure_nodal
        return x


def relative_residual(A, x: np.ndarray, b: np.ndarray) -> float:
    r = np.linalg.norm(A @ x - b)
    scale = np.linalg.norm(b)
    return float(r / scale) if scale > 0 else float(r)


def assemble_stokes(mesh: TriMesh, alpha: float,
                    load: Optional[np.ndarray] = None) -> SaddleSystem:
    """
    Assemble the condensed MINI system for viscosity alpha.

    Args:
        mesh: Valid mesh
        alpha: Viscosity (> 0)
        load: Body force at the quadrature points, shape (n_t, 6, 2); zero if None

    Returns:
        SaddleSystem without Dirichlet constraints
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    geom = ElementGeometry.from_mesh(mesh)
    n, n_t = mesh.n_nodes, mesh.n_triangles
    tri = mesh.triangles
    A, grads = geom.areas, geom.grads
    if load is None:
        load = np.zeros((n_t, 6, 2))

    # Viscous P1 block, identical for both components
    k_local = alpha * A[:, None, None] * np.einsum('tid,tjd->tij', grads, grads)
    rows_local = np.broadcast_to(tri[:, :, None], (n_t, 3, 3))
    cols_local = np.broadcast_to(tri[:, None, :], (n_t, 3, 3))

    rows, cols, vals = [], [], []
    for c in (0, 1):
        rows.append(rows_local + c * n)
        cols.append(cols_local + c * n)
        vals.append(k_local)

    # Divergence coupling B[m, (c, j)] = -int d_c(l_j) l_m = -(A/3) d_c(l_j)
    for c in (0, 1):
        b_local = np.broadcast_to((-A[:, None] / 3.0 * grads[:, :, c])[:, None, :], (n_t, 3, 3))
        rows += [rows_local + 2 * n, cols_local + c * n]
        cols += [cols_local + c * n, rows_local + 2 * n]
        vals += [b_local, b_local]

    # Bubble condensation
    coupling = BUBBLE_MASS * A[:, None, None] * grads.transpose(0, 2, 1)   # (n_t, 2, 3)
    diagonal = alpha * BUBBLE_STIFFNESS * A * np.einsum('tid,tid->t', grads, grads)
    c_local = np.einsum('tki,tkj->tij', coupling, coupling) / diagonal[:, None, None]
    rows.append(rows_local + 2 * n)
    cols.append(cols_local + 2 * n)
    vals.append(-c_local)

    # Mean-pressure multiplier
    mean_rows = tri.ravel() + 2 * n
    mean_vals = np.repeat(A / 3.0, 3)
    multiplier = np.full(mean_rows.size, 3 * n)
    rows += [mean_rows, multiplier]
    cols += [multiplier, mean_rows]
    vals += [mean_vals, mean_vals]

    size = 3 * n + 1
    matrix = sparse.coo_matrix(
        (np.concatenate([v.ravel() for v in vals]),
         (np.concatenate([r.ravel() for r in rows]), np.concatenate([c.ravel() for c in cols]))),
        shape=(size, size)).tocsr()

    weights = geom.quad_weights                                          # (n_t, 6)
    nodal_load = np.einsum('tq,qi,tqc->tic', weights, QUAD_BARY, load)  # (n_t, 3, 2)
    bubble_load = np.einsum('tq,q,tqc->tc', weights, QUAD_BUBBLE, load)  # (n_t, 2)

    rhs = np.zeros(size)
    np.add.at(rhs, tri.ravel(), nodal_load[:, :, 0].ravel())
    np.add.at(rhs, tri.ravel() + n, nodal_load[:, :, 1].ravel())
    pressure_load = -np.einsum('tki,tk->ti', coupling, bubble_load) / diagonal[:, None]
    np.add.at(rhs, tri.ravel() + 2 * n, pressure_load.ravel())

    return SaddleSystem(matrix, rhs, np.zeros(0, dtype=np.int64), np.zeros(0),
                        n, tri, coupling, diagonal, bubble_load)


def velocity_dofs(mesh: TriMesh, nodes: np.ndarray) -> np.ndarray:
    """Global x- and y-velocity dofs of the given nodes (x block first)."""
    return np.concatenate([nodes, nodes + mesh.n_nodes])


def boundary_flux(mesh: TriMesh, g_nodal: np.ndarray) -> float:
    """int_Gamma g_h . n ds for the piecewise-linear interpolant of g."""
    edges = mesh.boundary_edges[:, :2]
    owners = boundary_edge_triangles(mesh)
    pa, pb = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
    t = pb - pa
    normal = np.column_stack([t[:, 1], -t[:, 0]])                        # length-scaled
    third = mesh.triangles[owners].sum(axis=1) - edges[:, 0] - edges[:, 1]
    flip = np.einsum('ij,ij->i', mesh.nodes[third] - pa, normal) > 0
    normal[flip] *= -1.0
    mid = 0.5 * (g_nodal[edges[:, 0]] + g_nodal[edges[:, 1]])
    return float(np.einsum('ij,ij->', mid, normal))


def check_compatibility(mesh: TriMesh, g_nodal: np.ndarray):
    """
    Raises:
        CompatibilityViolated: if the boundary data carries a net flux
    """
    g_max = float(np.abs(g_nodal[mesh.boundary_nodes()]).max(initial=0.0))
    if g_max == 0.0:
        return
    e = mesh.boundary_edges[:, :2]
    perimeter = float(np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1).sum())
    flux = boundary_flux(mesh, g_nodal)
    bound = COMPATIBILITY_TOLERANCE * perimeter * g_max
    if abs(flux) > bound:
        raise CompatibilityViolated(
            f"boundary flux {flux:.3e} exceeds {bound:.3e} (perimeter {perimeter:.4g})")


def state_system(mesh: TriMesh, alpha: float, f: AnalyticField, g: AnalyticField) -> SaddleSystem:
    """Assembled and constrained state system; raises CompatibilityViolated."""
    geom = ElementGeometry.from_mesh(mesh)
    boundary = mesh.boundary_nodes()
    g_nodal = np.zeros((mesh.n_nodes, 2))
    g_nodal[boundary] = g(mesh.nodes[boundary])
    check_compatibility(mesh, g_nodal)
    system = assemble_stokes(mesh, alpha, evaluate_at_quadrature(geom, f))
    return system.constrain(velocity_dofs(mesh, boundary),
                            np.concatenate([g_nodal[boundary, 0], g_nodal[boundary, 1]]))


def adjoint_system(mesh: TriMesh, alpha: float, y: FlowField, y_d: AnalyticField) -> SaddleSystem:
    """Adjoint system driven by y - y_d at the quadrature points, v = 0 on Gamma."""
    y.check_shapes(mesh)
    geom = ElementGeometry.from_mesh(mesh)
    misfit = velocity_at_quadrature(mesh, geom, y) - evaluate_at_quadrature(geom, y_d)
    system = assemble_stokes(mesh, alpha, misfit)
    boundary = mesh.boundary_nodes()
    dofs = velocity_dofs(mesh, boundary)
    return system.constrain(dofs, np.zeros(dofs.size))


def solve_state(mesh: TriMesh, alpha: float, f: AnalyticField, g: AnalyticField) -> FlowField:
    """
    Solve -alpha Lap y + grad p = f, div y = 0, y = g on Gamma.

    Returns:
        FlowField with zero-mean pressure
    """
    return state_system(mesh, alpha, f, g).solve()


def solve_adjoint(mesh: TriMesh, alpha: float, y: FlowField, y_d: AnalyticField) -> FlowField:
    """Solve -alpha Lap v + grad q = y - y_d, div v = 0, v = 0 on Gamma."""
    return adjoint_system(mesh, alpha, y, y_d).solve()


def boundary_reaction(system: SaddleSystem, flow: FlowField) -> np.ndarray:
    """
    Residual of the unconstrained velocity rows at the Dirichlet nodes.

    For the adjoint this is the discrete multiplier mu = alpha Dv n - q n
    tested against the boundary hat functions.

    Returns:
        (n_v, 2) array, zero away from the constrained nodes
    """
    n = system.n_nodes
    residual = system.matrix @ system.pack(flow) - system.rhs
    reaction = np.zeros((n, 2))
    dofs = system.dirichlet_dofs
    x_dofs, y_dofs = dofs[dofs < n], dofs[(dofs >= n) & (dofs < 2 * n)]
    reaction[x_dofs, 0] = residual[x_dofs]
    reaction[y_dofs - n, 1] = residual[y_dofs]
    return reaction


def compute_cost(mesh: TriMesh, y: FlowField, y_d: AnalyticField) -> float:
    """J = 1/2 int |y - y_d|^2 with the degree-4 rule."""
    geom = ElementGeometry.from_mesh(mesh)
    misfit = velocity_at_quadrature(mesh, geom, y) - evaluate_at_quadrature(geom, y_d)
    return 0.5 * float(np.einsum('tq,tqc,tqc->', geom.quad_weights, misfit, misfit))


def l2_error(mesh: TriMesh, y: FlowField, exact: AnalyticField) -> float:
    geom = ElementGeometry.from_mesh(mesh)
    e = velocity_at_quadrature(mesh, geom, y) - evaluate_at_quadrature(geom, exact)
    return float(np.sqrt(np.einsum('tq,tqc,tqc->', geom.quad_weights, e, e)))


def h1_error(mesh: TriMesh, y: FlowField, exact: AnalyticField) -> float:
    """H1 seminorm of the velocity error."""
    geom = ElementGeometry.from_mesh(mesh)
    e = velocity_gradient_at_quadrature(mesh, geom, y) - jacobian_at_quadrature(geom, exact)
    return float(np.sqrt(np.einsum('tq,tqcd,tqcd->', geom.quad_weights, e, e)))


def pressure_l2_error(mesh: TriMesh, p: np.ndarray, exact=None) -> float:
    """L2 error of the pressure against a scalar function (zero if None)."""
    geom = ElementGeometry.from_mesh(mesh)
    values = pressure_at_quadrature(mesh, p)
    if exact is not None:
        n_t = mesh.n_triangles
        values = values - np.asarray(exact(geom.points.reshape(-1, 2))).reshape(n_t, 6)
    return float(np.sqrt(np.einsum('tq,tq,tq->', geom.quad_weights, values, values)))


def pressure_mean(mesh: TriMesh, p: np.ndarray) -> float:
    """int_Omega p dx."""
    return float(np.sum(mesh.signed_areas() * p[mesh.triangles].sum(axis=1) / 3.0))


def domain_area(mesh: TriMesh) -> float:
    return float(mesh.signed_areas().sum())


def manufactured_convergence(alpha: float, meshes) -> pd.DataFrame:
    """
    Error table of the swirl manufactured solution on the target annulus.

    Args:
        alpha: Viscosity
        meshes: Sequence of (n_theta, n_r), coarse to fine

    Returns:
        One row per mesh with errors and the ratio to the previous row
    """
    exact = target_velocity()
    force = manufactured_force(alpha)
    rows = []
    for n_theta, n_r in meshes:
        mesh = annulus_for_case("target", n_theta, n_r)
        y = solve_state(mesh, alpha, force, ZeroField())
        rows.append({
            'n_theta': n_theta,
            'n_r': n_r,
            'h': float(edge_lengths(mesh).max()),
            'velocity_l2': l2_error(mesh, y, exact),
            'velocity_h1': h1_error(mesh, y, exact),
            'pressure_l2': pressure_l2_error(mesh, y.pressure_nodal),
        })
        logger.info("Convergence %dx%d: L2=%.3e H1=%.3e p=%.3e", n_theta, n_r,
                    rows[-1]['velocity_l2'], rows[-1]['velocity_h1'], rows[-1]['pressure_l2'])
    table = pd.DataFrame(rows)
    for column in ('velocity_l2', 'velocity_h1', 'pressure_l2'):
        table[f'{column}_ratio'] = table[column].shift(1) / table[column]
    return table
