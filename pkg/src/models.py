"""
Data models for the shape optimizer.
Defines the mesh, the discrete flow fields, the boundary density and the
optimization records.
"""

from dataclasses import dataclass, field, asdict
from typing import List, Optional, Dict, Any

import numpy as np

from config.settings import DEFAULTS, INTERIOR


# Per-node 2D vectors, shape (n_v, 2). Used both for the optimizer's descent
# field d and for the autonomous perturbation V in T_t = Id + tV.
DisplacementField = np.ndarray
PerturbationField = np.ndarray


def _frozen(array, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class TriMesh:
    """
    Triangular mesh of an annular domain.

    nodes are (n_v, 2) coordinates, triangles (n_t, 3) counterclockwise vertex
    indices, boundary_edges (n_b, 3) rows of (v1, v2, marker) and node_markers
    one of INTERIOR / OUTER_FIXED / INNER_FREE per node. All arrays are
    read-only; deformations build a new mesh.
    """
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    node_markers: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'nodes', _frozen(self.nodes, float).reshape(-1, 2))
        object.__setattr__(self, 'triangles', _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, 'boundary_edges', _frozen(self.boundary_edges, np.int64).reshape(-1, 3))
        object.__setattr__(self, 'node_markers', _frozen(self.node_markers, np.int64).reshape(-1))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        """Signed area of every triangle (positive for CCW orientation)."""
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def nodes_with_marker(self, marker: int) -> np.ndarray:
        return np.flatnonzero(self.node_markers == marker)

    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_markers != INTERIOR)

    def edges_with_marker(self, marker: int) -> np.ndarray:
        return self.boundary_edges[self.boundary_edges[:, 2] == marker, :2]

    def with_nodes(self, nodes: np.ndarray) -> 'TriMesh':
        """Same connectivity and markers, new coordinates."""
        return TriMesh(nodes, self.triangles, self.boundary_edges, self.node_markers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TriMesh):
            return NotImplemented
        return (np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.triangles, other.triangles)
                and np.array_equal(self.boundary_edges, other.boundary_edges)
                and np.array_equal(self.node_markers, other.node_markers))

    __hash__ = None


@dataclass
class FlowField:
    """
    Discrete MINI-element velocity/pressure pair on one mesh.

    velocity_bubble holds the coefficient of the cubic bubble 27*l1*l2*l3 of
    each triangle (the bubble equals 1 at the centroid).
    """
    velocity_nodal: np.ndarray
    velocity_bubble: np.ndarray
    pressure_nodal: np.ndarray

    @classmethod
    def zeros(cls, mesh: TriMesh) -> 'FlowField':
        return cls(np.zeros((mesh.n_nodes, 2)), np.zeros((mesh.n_triangles, 2)),
                   np.zeros(mesh.n_nodes))

    def check_shapes(self, mesh: TriMesh):
        """Raise ValueError when the arrays do not match the mesh."""
        if self.velocity_nodal.shape != (mesh.n_nodes, 2):
            raise ValueError(f"velocity_nodal shape {self.velocity_nodal.shape} "
                             f"does not match {mesh.n_nodes} nodes")
        if self.velocity_bubble.shape != (mesh.n_triangles, 2):
            raise ValueError(f"velocity_bubble shape {self.velocity_bubble.shape} "
                             f"does not match {mesh.n_triangles} triangles")
        if self.pressure_nodal.shape != (mesh.n_nodes,):
            raise ValueError(f"pressure_nodal shape {self.pressure_nodal.shape} "
                             f"does not match {mesh.n_nodes} nodes")


@dataclass
class BoundaryDensity:
    """
    Shape-gradient density on the free boundary.

    node_ids are the INNER_FREE nodes in loop order, values the density w_i,
    measures the lumped boundary length s_i and normals the unit outward
    normals of the domain at those nodes.
    """
    node_ids: np.ndarray
    values: np.ndarray
    measures: np.ndarray
    normals: np.ndarray

    def pairing(self, V: PerturbationField) -> float:
        """Sum_i w_i s_i (V.n)_i."""
        vn = np.einsum('ij,ij->i', V[self.node_ids], self.normals)
        return float(np.sum(self.values * self.measures * vn))


@dataclass
class OptConfig:
    """
    Parameters of one shape-optimization experiment.
    """
    case: str = DEFAULTS['case']
    alpha: float = DEFAULTS['alpha']
    n_theta: int = DEFAULTS['n_theta']
    n_r: int = DEFAULTS['n_r']
    max_iters: int = DEFAULTS['max_iters']
    grad_tol: float = DEFAULTS['grad_tol']
    step_cap: float = DEFAULTS['step_cap']
    armijo_c: float = DEFAULTS['armijo_c']
    descent: str = DEFAULTS['descent']
    output_dir: str = DEFAULTS['output_dir']
    emit_vtk: bool = DEFAULTS['emit_vtk']
    fd_check: bool = DEFAULTS['fd_check']
    fd_step: float = DEFAULTS['fd_step']
    recovery: str = DEFAULTS['recovery']

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to dictionary."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OptConfig':
        """Create OptConfig from dictionary."""
        return cls(**data)


@dataclass
class IterationRecord:
    """One row of the optimization history."""
    k: int
    cost: float
    grad_norm: float
    step: float
    mesh_quality: float
    mean_inner_radius: float
    wall_seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iter': self.k,
            'cost': self.cost,
            'grad_norm': self.grad_norm,
            'step': self.step,
            'mesh_quality': self.mesh_quality,
            'mean_inner_radius': self.mean_inner_radius,
        }


@dataclass
class OptState:
    """
    Running state of the descent loop.

    history holds one record per accepted iterate, starting with k = 0.
    """
    mesh: TriMesh
    k: int = 0
    cost: float = float('nan')
    direction: Optional[DisplacementField] = None
    step: float = 0.0
    history: List[IterationRecord] = field(default_factory=list)
    state: Optional[FlowField] = None
    adjoint: Optional[FlowField] = None
    stop_reason: str = ""
