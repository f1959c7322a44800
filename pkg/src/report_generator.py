"""
Report Generator - Writes run artifacts (CSV tables, meshes, VTK fields,
summary) and formats console reports of optimization runs.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from config.settings import (
    CONVERGENCE_FILE, DENSITY_FILE, FAILED_MESH_FILE, FIELDS_FILE_PATTERN,
    FINAL_BOUNDARY_FILE, FLOAT_FORMAT, GRADIENT_CHECK_FILE, HISTORY_FILE,
    MESH_FILE_PATTERN, SUMMARY_FILE, TIMING_FILE,
)
from src.mesh import inner_loop
from src.mesh_loader import save_mesh
from src.models import BoundaryDensity, FlowField, IterationRecord, OptState, TriMesh
from src.shape_calculus import save_density_csv

logger = logging.getLogger(__name__)


def write_vtk(path, mesh: TriMesh, flow: FlowField, title: str = "shapeopt fields"):
    """
    Legacy VTK 2.0 unstructured grid with nodal velocity and pressure.

    Args:
        path: Destination .vtk file
        mesh: Mesh carrying the fields
        flow: FlowField on mesh (only the nodal velocity part is written)
    """
    def fmt(value: float) -> str:
        return FLOAT_FORMAT % value

    lines = ["# vtk DataFile Version 2.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.nodes]
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines += ["5"] * mesh.n_triangles
    lines += [f"POINT_DATA {mesh.n_nodes}", "VECTORS velocity double"]
    lines += [f"{fmt(u)} {fmt(v)} 0" for u, v in flow.velocity_nodal]
    lines += ["SCALARS pressure double 1", "LOOKUP_TABLE default"]
    lines += [fmt(p) for p in flow.pressure_nodal]

    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write("\n".join(lines) + "\n")


def history_frame(history: List[IterationRecord]) -> pd.DataFrame:
    return pd.DataFrame([record.to_dict() for record in history],
                        columns=['iter', 'cost', 'grad_norm', 'step',
                                 'mesh_quality', 'mean_inner_radius'])


def final_boundary_frame(mesh: TriMesh) -> pd.DataFrame:
    loop = inner_loop(mesh)
    return pd.DataFrame({'node_id': loop + 1,
                         'x': mesh.nodes[loop, 0],
                         'y': mesh.nodes[loop, 1]})


class ReportGenerator:
    """
    Writes the artifacts of one run into an output directory.
    """

    def __init__(self, output_dir: str, emit_vtk: bool = True):
        """
        Initialize the report generator.

        Args:
            output_dir: Run directory; its parent must exist
            emit_vtk: Whether fields_####.vtk files are written per iterate
        """
        self.output_dir = Path(output_dir)
        self.emit_vtk = emit_vtk

    def prepare(self):
        """
        Create the output directory.

        Raises:
            FileNotFoundError: if the parent directory does not exist
        """
        if not self.output_dir.parent.exists():
            raise FileNotFoundError(
                f"Parent of output directory does not exist: {self.output_dir.parent}")
        self.output_dir.mkdir(exist_ok=True)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def write_iterate(self, k: int, mesh: TriMesh, flow: FlowField):
        save_mesh(mesh, self.path(MESH_FILE_PATTERN.format(k)))
        if self.emit_vtk:
            write_vtk(self.path(FIELDS_FILE_PATTERN.format(k)), mesh, flow,
                      title=f"shapeopt iterate {k}")

    def write_history(self, history: List[IterationRecord]):
        """history.csv (deterministic columns) and timing.csv (wall-clock seconds)."""
        history_frame(history).to_csv(self.path(HISTORY_FILE), index=False,
                                      float_format=FLOAT_FORMAT)
        timing = pd.DataFrame({'iter': [r.k for r in history],
                               'wall_seconds': [r.wall_seconds for r in history]})
        timing.to_csv(self.path(TIMING_FILE), index=False, float_format=FLOAT_FORMAT)
        logger.info("Wrote %s (%d records)", self.path(HISTORY_FILE), len(history))

    def write_final_boundary(self, mesh: TriMesh):
        final_boundary_frame(mesh).to_csv(self.path(FINAL_BOUNDARY_FILE), index=False,
                                          float_format=FLOAT_FORMAT)

    def write_density(self, mesh: TriMesh, density: BoundaryDensity):
        save_density_csv(self.path(DENSITY_FILE), mesh, density)

    def write_gradient_check(self, table: pd.DataFrame):
        table.to_csv(self.path(GRADIENT_CHECK_FILE), index=False, float_format=FLOAT_FORMAT)

    def write_convergence(self, table: pd.DataFrame):
        table.to_csv(self.path(CONVERGENCE_FILE), index=False, float_format=FLOAT_FORMAT)

    def dump_failed_mesh(self, mesh: TriMesh) -> Path:
        path = self.path(FAILED_MESH_FILE)
        save_mesh(mesh, path)
        logger.error("Mesh quality abort: failing mesh written to %s", path)
        return path

    def write_summary(self, summary: Dict[str, object]):
        """summary.txt as key = value lines."""
        lines = []
        for key, value in summary.items():
            text = FLOAT_FORMAT % value if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        with open(self.path(SUMMARY_FILE), 'w', encoding='utf-8', newline='\n') as f:
            f.write("\n".join(lines) + "\n")

    @staticmethod
    def read_summary(path) -> Dict[str, str]:
        summary = {}
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if '=' in line:
                    key, value = line.split('=', 1)
                    summary[key.strip()] = value.strip()
        return summary

    @staticmethod
    def generate_console_report(state: OptState, summary: Optional[Dict[str, object]] = None) -> str:
        """
        Generate a formatted console report of a finished run.

        Args:
            state: Final optimizer state
            summary: Values written to summary.txt

        Returns:
            Formatted report string
        """
        report = []
        report.append("\n" + "=" * 80)
        report.append("         SHAPE OPTIMIZATION REPORT")
        report.append("=" * 80)

        if state.history:
            report.append(f"\n{'iter':>5} {'cost':>14} {'grad_norm':>12} {'step':>11} "
                          f"{'quality':>8} {'radius':>8}")
            report.append("─" * 80)
            for r in state.history:
                report.append(f"{r.k:>5} {r.cost:>14.6e} {r.grad_norm:>12.4e} {r.step:>11.3e} "
                              f"{r.mesh_quality:>8.4f} {r.mean_inner_radius:>8.5f}")

        report.append("\n" + "─" * 80)
        report.append(f"Stop reason: {state.stop_reason}")
        for key, value in (summary or {}).items():
            text = f"{value:.6g}" if isinstance(value, float) else str(value)
            report.append(f"{key}: {text}")
        report.append("=" * 80)
        return "\n".join(report)
