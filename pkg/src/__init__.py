"""
shapeopt - Stokes shape optimization
Adjoint-based shape gradients and H1 gradient descent for the inner boundary
of an annular domain.
"""

__version__ = "1.0.0"
