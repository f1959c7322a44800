"""
Shared fixtures: small meshes and solved Case 1 states.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config.settings import INTERIOR  # noqa: E402
from src.mesh import annulus_for_case  # noqa: E402
from src.models import TriMesh  # noqa: E402
from src.optimizer import ShapeProblem  # noqa: E402
from src.stokes_fem import solve_adjoint, solve_state  # noqa: E402


def single_triangle(points) -> TriMesh:
    """A one-triangle TriMesh (not a valid annulus; used for element-level checks)."""
    return TriMesh(np.asarray(points, dtype=float), [[0, 1, 2]],
                   np.zeros((0, 3), dtype=int), np.full(3, INTERIOR))


@pytest.fixture(scope="session")
def small_mesh():
    return annulus_for_case("circle_04", 16, 4)


@pytest.fixture(scope="session")
def coarse_mesh():
    return annulus_for_case("circle_04", 32, 8)


@pytest.fixture(scope="session")
def case1_mesh():
    return annulus_for_case("circle_04", 64, 16)


@pytest.fixture(scope="session")
def problem():
    return ShapeProblem.manufactured(0.01)


@pytest.fixture(scope="session")
def case1_solution(case1_mesh, problem):
    """(y, v) on the Case 1 mesh with alpha = 0.01."""
    y = solve_state(case1_mesh, problem.alpha, problem.f, problem.g)
    v = solve_adjoint(case1_mesh, problem.alpha, y, problem.y_d)
    return y, v
