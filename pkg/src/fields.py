"""
Closed-form vector fields used as body force f, boundary data g and target
velocity y_d. Every field returns values of shape (n, 2) and Jacobians of
shape (n, 2, 2) with J[:, i, j] = d u_i / d x_j.
"""

from typing import Callable, Optional

import numpy as np

from config.settings import OUTER_RADIUS, TARGET_RADIUS
from src.errors import OriginEvaluation

ORIGIN_RADIUS = 1e-12


def _points(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, 2)


class AnalyticField:
    """Base class: a vector field with a closed-form Jacobian."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def divergence(self, x: np.ndarray) -> np.ndarray:
        J = self.jacobian(x)
        return J[:, 0, 0] + J[:, 1, 1]


class ZeroField(AnalyticField):

    def __call__(self, x):
        return np.zeros((_points(x).shape[0], 2))

    def jacobian(self, x):
        return np.zeros((_points(x).shape[0], 2, 2))


class ConstantField(AnalyticField):

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float).reshape(2)

    def __call__(self, x):
        return np.tile(self.value, (_points(x).shape[0], 1))

    def jacobian(self, x):
        return np.zeros((_points(x).shape[0], 2, 2))


class LinearField(AnalyticField):
    """u(x) = A x + b."""

    def __init__(self, matrix, offset=(0.0, 0.0)):
        self.matrix = np.asarray(matrix, dtype=float).reshape(2, 2)
        self.offset = np.asarray(offset, dtype=float).reshape(2)

    def __call__(self, x):
        return _points(x) @ self.matrix.T + self.offset

    def jacobian(self, x):
        return np.tile(self.matrix, (_points(x).shape[0], 1, 1))


class FunctionField(AnalyticField):
    """Field built from user-supplied value and Jacobian callables."""

    def __init__(self, value: Callable[[np.ndarray], np.ndarray],
                 jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        self._value = value
        self._jacobian = jacobian

    def __call__(self, x):
        return np.asarray(self._value(_points(x)), dtype=float).reshape(-1, 2)

    def jacobian(self, x):
        if self._jacobian is None:
            raise NotImplementedError("FunctionField was built without a Jacobian")
        return np.asarray(self._jacobian(_points(x)), dtype=float).reshape(-1, 2, 2)


class SwirlField(AnalyticField):
    """
    Rotational field u(x) = chi(r) * (-y, x).

    chi and its derivative dchi are functions of r. Swirl fields of this
    form are divergence-free for any chi.
    """

    def __init__(self, chi: Callable[[np.ndarray], np.ndarray],
                 dchi: Callable[[np.ndarray], np.ndarray]):
        self.chi = chi
        self.dchi = dchi

    @staticmethod
    def _radius(x: np.ndarray) -> np.ndarray:
        r = np.hypot(x[:, 0], x[:, 1])
        if np.any(r < ORIGIN_RADIUS):
            raise OriginEvaluation("swirl field evaluated at the origin")
        return r

    def __call__(self, x):
        x = _points(x)
        c = self.chi(self._radius(x))
        return np.column_stack([-x[:, 1] * c, x[:, 0] * c])

    def jacobian(self, x):
        x = _points(x)
        r = self._radius(x)
        c = self.chi(r)
        s = self.dchi(r) / r
        J = np.empty((x.shape[0], 2, 2))
        J[:, 0, 0] = -x[:, 1] * s * x[:, 0]
        J[:, 0, 1] = -c - x[:, 1] * s * x[:, 1]
        J[:, 1, 0] = c + x[:, 0] * s * x[:, 0]
        J[:, 1, 1] = x[:, 0] * s * x[:, 1]
        return J


def target_velocity(inner: float = TARGET_RADIUS, outer: float = OUTER_RADIUS) -> SwirlField:
    """
    Target velocity y_d = (r - inner)(r - outer)/r * (-y, x).

    Vanishes on both circles of the target annulus.
    """
    ab = inner * outer
    return SwirlField(lambda r: r - (inner + outer) + ab / r,
                      lambda r: 1.0 - ab / r ** 2)


def manufactured_force(alpha: float, inner: float = TARGET_RADIUS,
                       outer: float = OUTER_RADIUS) -> SwirlField:
    """
    Body force f = -alpha * Laplacian(y_d) = -alpha (3 - inner*outer/r^2) t_hat.

    With this force, (y_d, p = 0) solves the Stokes problem with zero
    boundary data on the target annulus.
    """
    ab = inner * outer
    return SwirlField(lambda r: -alpha * (3.0 / r - ab / r ** 3),
                      lambda r: -alpha * (-3.0 / r ** 2 + 3.0 * ab / r ** 4))


_TARGET = target_velocity()


def evaluate_target(point) -> np.ndarray:
    """y_d at a single point."""
    return _TARGET(np.asarray(point, dtype=float).reshape(1, 2))[0]
