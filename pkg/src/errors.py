"""
Exceptions raised by the shape optimizer.
"""


class ShapeOptError(Exception):
    """Base class for all shapeopt failures."""


class MeshParseError(ShapeOptError):
    """Malformed mesh file."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MeshValidationError(ShapeOptError):
    """A TriMesh invariant does not hold."""


class StepTooLarge(ShapeOptError):
    """A deformation would collapse or invert a triangle."""


class CompatibilityViolated(ShapeOptError):
    """Boundary data carries a net flux through the boundary."""


class SolverBreakdown(ShapeOptError):
    """The linear solve did not reach the residual tolerance."""

    def __init__(self, message: str, residual: float = float('nan')):
        super().__init__(message)
        self.residual = residual


class LineSearchFailed(ShapeOptError):
    """No acceptable step was found within the backtracking budget."""


class OriginEvaluation(ShapeOptError):
    """A radial field was evaluated at the origin."""


class MeshQualityAbort(ShapeOptError):
    """Mesh quality dropped below the abort threshold."""

    def __init__(self, message: str, quality: float):
        super().__init__(message)
        self.quality = quality


class ConfigError(ShapeOptError):
    """Unknown key or out-of-range value in the experiment configuration."""
