"""
Mesh Loader - Reads and writes TriMesh files in the sectioned ASCII format.

    $Nodes / $Elements / $BoundaryEdges / $End

Ids in the file are 1-based; coordinates are written with 17 significant
digits so a save/load round trip reproduces the mesh bit for bit.
"""

import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np

from config.settings import FLOAT_FORMAT
from src.errors import MeshParseError
from src.mesh import validate_mesh
from src.models import TriMesh

logger = logging.getLogger(__name__)

SECTIONS = ("$Nodes", "$Elements", "$BoundaryEdges")


class MeshLoader:
    """Loads and parses a mesh file into a TriMesh."""

    def __init__(self, mesh_path: str):
        """
        Initialize the mesh loader.

        Args:
            mesh_path: Path to the mesh file
        """
        self.mesh_path = Path(mesh_path)
        self._lines: List[Tuple[int, str]] = []
        self._pos = 0

    def load_mesh(self) -> TriMesh:
        """
        Load and validate the mesh.

        Returns:
            TriMesh

        Raises:
            FileNotFoundError: if the file does not exist
            MeshParseError: on malformed content, naming the line number
            MeshValidationError: if the parsed mesh violates an invariant
        """
        if not self.mesh_path.exists():
            raise FileNotFoundError(f"Mesh file not found: {self.mesh_path}")

        with open(self.mesh_path, 'r', encoding='utf-8') as file:
            self._lines = [(i + 1, line.strip()) for i, line in enumerate(file)
                           if line.strip()]
        self._pos = 0

        node_rows = self._parse_section("$Nodes", 4)
        element_rows = self._parse_section("$Elements", 4)
        edge_rows = self._parse_section("$BoundaryEdges", 4)
        self._expect("$End")
        if self._pos != len(self._lines):
            line_number, _ = self._lines[self._pos]
            raise MeshParseError("content after $End", line_number)

        nodes = np.array([[float(r[1]), float(r[2])] for r in node_rows]).reshape(-1, 2)
        markers = np.array([int(r[3]) for r in node_rows], dtype=np.int64)
        triangles = np.array([[int(v) - 1 for v in r[1:]] for r in element_rows],
                             dtype=np.int64).reshape(-1, 3)
        edges = np.array([[int(r[1]) - 1, int(r[2]) - 1, int(r[3])] for r in edge_rows],
                         dtype=np.int64).reshape(-1, 3)

        mesh = TriMesh(nodes, triangles, edges, markers)
        validate_mesh(mesh)
        logger.info("Loaded mesh %s (%d nodes, %d triangles)",
                    self.mesh_path, mesh.n_nodes, mesh.n_triangles)
        return mesh

    def _next(self, what: str) -> Tuple[int, str]:
        if self._pos >= len(self._lines):
            last = self._lines[-1][0] + 1 if self._lines else 1
            raise MeshParseError(f"unexpected end of file, expected {what}", last)
        item = self._lines[self._pos]
        self._pos += 1
        return item

    def _expect(self, header: str):
        line_number, text = self._next(header)
        if text != header:
            raise MeshParseError(f"expected {header}, found '{text}'", line_number)

    def _parse_section(self, header: str, n_fields: int) -> List[List[str]]:
        """
        Parse one section: header line, count line, then count rows.

        The first field of every row must be its 1-based id.
        """
        self._expect(header)
        line_number, text = self._next(f"{header} count")
        try:
            count = int(text)
        except ValueError:
            raise MeshParseError(f"invalid {header} count '{text}'", line_number)
        if count < 0:
            raise MeshParseError(f"negative {header} count {count}", line_number)

        rows = []
        for expected_id in range(1, count + 1):
            line_number, text = self._next(f"{header} row {expected_id}")
            fields = text.split()
            if fields[0].startswith("$"):
                raise MeshParseError(
                    f"{header} declares {count} rows but only {expected_id - 1} found",
                    line_number)
            if len(fields) != n_fields:
                raise MeshParseError(
                    f"expected {n_fields} fields in {header} row, found {len(fields)}",
                    line_number)
            try:
                row_id = int(fields[0])
                if header == "$Nodes":
                    float(fields[1]), float(fields[2]), int(fields[3])
                else:
                    [int(v) for v in fields[1:]]
            except ValueError:
                raise MeshParseError(f"non-numeric value in {header} row", line_number)
            if row_id != expected_id:
                raise MeshParseError(f"expected id {expected_id}, found {row_id}", line_number)
            rows.append(fields)
        return rows


def load_mesh(path) -> TriMesh:
    return MeshLoader(path).load_mesh()


def save_mesh(mesh: TriMesh, path):
    """
    Write a mesh in the sectioned ASCII format with LF line endings.

    Args:
        mesh: Mesh to write
        path: Destination file; the parent directory must exist
    """
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"Output directory does not exist: {path.parent}")

    def fmt(value: float) -> str:
        return FLOAT_FORMAT % value

    lines = ["$Nodes", str(mesh.n_nodes)]
    for i, ((x, y), m) in enumerate(zip(mesh.nodes, mesh.node_markers), start=1):
        lines.append(f"{i} {fmt(x)} {fmt(y)} {m}")
    lines += ["$Elements", str(mesh.n_triangles)]
    for i, (a, b, c) in enumerate(mesh.triangles, start=1):
        lines.append(f"{i} {a + 1} {b + 1} {c + 1}")
    lines += ["$BoundaryEdges", str(mesh.boundary_edges.shape[0])]
    for i, (a, b, m) in enumerate(mesh.boundary_edges, start=1):
        lines.append(f"{i} {a + 1} {b + 1} {m}")
    lines.append("$End")

    with open(path, 'w', encoding='utf-8', newline='\n') as file:
        file.write("\n".join(lines) + "\n")
    logger.debug("Saved mesh to %s", path)
