"""Objective corpus with hand-coded derivatives and minimizer metadata.

Every builtin is vectorized over leading axes: ``value`` maps an array of
shape ``(..., d)`` to ``(...)``, ``gradient`` to ``(..., d)`` and ``hessian``
to ``(..., d, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import bisect

__all__ = [
    "ObjectiveSpec",
    "BUILTIN_NAMES",
    "builtin_objective",
    "DOUBLE_WELL_TILT",
]

DOUBLE_WELL_TILT = 0.3

BUILTIN_NAMES = (
    "iso_quadratic",
    "aniso_quadratic",
    "shifted_double_well",
    "rosenbrock",
    "smoothed_ackley",
)

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    """An objective ``f`` on ``R^d`` together with its derivatives.

    Instances hash by identity so they can key per-objective caches.

    Attributes
    ----------
    quadratic_matrix : ndarray, optional
        Set when ``f(y) = 0.5 * y^T A y`` exactly; enables closed-form
        Gaussian evaluation of every Gibbs quantity.
    demo_only : bool
        The objective violates the integrability/regularity assumptions the
        verification suite relies on and must only appear in demo output.
    """

    name: str
    dim: int
    value: ArrayFn
    gradient: ArrayFn
    hessian: ArrayFn
    known_min_value: Optional[float] = None
    known_minimizer: Optional[np.ndarray] = None
    known_hessian_at_min: Optional[np.ndarray] = None
    coercivity_radius_hint: float = 5.0
    quadratic_matrix: Optional[np.ndarray] = field(default=None, repr=False)
    demo_only: bool = False

    def __call__(self, y):
        return self.value(np.asarray(y, dtype=float))


def _quadratic(name: str, diag: np.ndarray) -> ObjectiveSpec:
    A = np.diag(diag)
    d = diag.size

    def value(y):
        return 0.5 * np.sum(diag * y * y, axis=-1)

    def gradient(y):
        return diag * y

    def hessian(y):
        return np.broadcast_to(A, y.shape[:-1] + (d, d)).copy()

    # f >= f* + 1 once 0.5 * min(diag) * |y|^2 >= 1
    radius = float(np.sqrt(2.0 / diag.min()))
    return ObjectiveSpec(
        name=name,
        dim=d,
        value=value,
        gradient=gradient,
        hessian=hessian,
        known_min_value=0.0,
        known_minimizer=np.zeros(d),
        known_hessian_at_min=A.copy(),
        coercivity_radius_hint=radius,
        quadratic_matrix=A.copy(),
    )


def _double_well_1d(s):
    return (s * s - 1.0) ** 2 + DOUBLE_WELL_TILT * s


def _double_well_root() -> float:
    """Global minimizer of the 1-d tilted double well.

    Bisection on the stationarity cubic ``4 s^3 - 4 s + tilt = 0`` over the
    negative branch, followed by two Newton polish steps.
    """
    cubic = lambda s: 4.0 * s**3 - 4.0 * s + DOUBLE_WELL_TILT  # noqa: E731
    root = bisect(cubic, -2.0, -0.5, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    for _ in range(2):
        root -= cubic(root) / (12.0 * root**2 - 4.0)
    return float(root)


def _double_well(d: int) -> ObjectiveSpec:
    s_star = _double_well_root()
    f1_star = _double_well_1d(s_star)

    def value(y):
        return np.sum((y * y - 1.0) ** 2 + DOUBLE_WELL_TILT * y, axis=-1)

    def gradient(y):
        return 4.0 * y**3 - 4.0 * y + DOUBLE_WELL_TILT

    def hessian(y):
        diag = 12.0 * y * y - 4.0
        out = np.zeros(y.shape + (d,))
        idx = np.arange(d)
        out[..., idx, idx] = diag
        return out

    # 1-d radius where f1 >= f1* + 1 away from s*; scaled by sqrt(d) because a
    # displacement of R in R^d moves some coordinate by at least R / sqrt(d).
    s = np.linspace(-4.0, 4.0, 80001)
    inside = np.abs(s - s_star)[_double_well_1d(s) < f1_star + 1.0]
    radius_1d = float(inside.max())
    x_star = np.full(d, s_star)
    return ObjectiveSpec(
        name="shifted_double_well",
        dim=d,
        value=value,
        gradient=gradient,
        hessian=hessian,
        known_min_value=float(d * f1_star),
        known_minimizer=x_star,
        known_hessian_at_min=np.diag(np.full(d, 12.0 * s_star**2 - 4.0)),
        coercivity_radius_hint=radius_1d * np.sqrt(d),
    )


def _rosenbrock(d: int) -> ObjectiveSpec:
    def value(y):
        a = y[..., :-1]
        b = y[..., 1:]
        return np.sum(100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2, axis=-1)

    def gradient(y):
        a = y[..., :-1]
        b = y[..., 1:]
        r = b - a * a
        g = np.zeros_like(y)
        g[..., :-1] += -400.0 * a * r - 2.0 * (1.0 - a)
        g[..., 1:] += 200.0 * r
        return g

    def hessian(y):
        a = y[..., :-1]
        b = y[..., 1:]
        H = np.zeros(y.shape + (d,))
        i = np.arange(d - 1)
        H[..., i, i] += 1200.0 * a * a - 400.0 * b + 2.0
        H[..., i + 1, i + 1] += 200.0
        H[..., i, i + 1] = -400.0 * a
        H[..., i + 1, i] = -400.0 * a
        return H

    x_star = np.ones(d)
    return ObjectiveSpec(
        name="rosenbrock",
        dim=d,
        value=value,
        gradient=gradient,
        hessian=hessian,
        known_min_value=0.0,
        known_minimizer=x_star,
        known_hessian_at_min=hessian(x_star),
        coercivity_radius_hint=2.0 * np.sqrt(d),
    )


_ACKLEY_EPS = 1e-6


def _smoothed_ackley(d: int) -> ObjectiveSpec:
    k = 0.2 / np.sqrt(d)
    two_pi = 2.0 * np.pi

    def value(y):
        r = np.sqrt(np.sum(y * y, axis=-1) + _ACKLEY_EPS)
        c = np.mean(np.cos(two_pi * y), axis=-1)
        return -20.0 * np.exp(-k * r) - np.exp(c) + 20.0 + np.e

    def gradient(y):
        r = np.sqrt(np.sum(y * y, axis=-1) + _ACKLEY_EPS)[..., None]
        c = np.mean(np.cos(two_pi * y), axis=-1)[..., None]
        g1 = 20.0 * k * np.exp(-k * r) * y / r
        g2 = np.exp(c) * two_pi * np.sin(two_pi * y) / d
        return g1 + g2

    def hessian(y):
        r = np.sqrt(np.sum(y * y, axis=-1) + _ACKLEY_EPS)[..., None, None]
        c = np.mean(np.cos(two_pi * y), axis=-1)[..., None, None]
        eye = np.eye(d)
        outer = y[..., :, None] * y[..., None, :]
        grad_r_outer = outer / r**2
        hess_r = (eye - grad_r_outer) / r
        h1 = 20.0 * k * np.exp(-k * r) * (hess_r - k * grad_r_outer)
        dc = -two_pi * np.sin(two_pi * y) / d
        diag = np.zeros(y.shape + (d,))
        idx = np.arange(d)
        diag[..., idx, idx] = -(two_pi**2) * np.cos(two_pi * y) / d
        h2 = -np.exp(c) * (dc[..., :, None] * dc[..., None, :] + diag)
        return h1 + h2

    x_star = np.zeros(d)
    return ObjectiveSpec(
        name="smoothed_ackley",
        dim=d,
        value=value,
        gradient=gradient,
        hessian=hessian,
        known_min_value=float(value(x_star)),
        known_minimizer=x_star,
        known_hessian_at_min=hessian(x_star),
        coercivity_radius_hint=35.0 * np.sqrt(d),
        demo_only=True,
    )


def builtin_objective(name: str, dim: int) -> ObjectiveSpec:
    """Return a builtin objective by name.

    Parameters
    ----------
    name : str
        One of :data:`BUILTIN_NAMES`.
    dim : int
        Dimension ``d >= 1``; ``rosenbrock`` requires ``d >= 2``.

    Raises
    ------
    ValueError
        Unknown name or a dimension the family does not support.
    """
    if not isinstance(dim, (int, np.integer)) or isinstance(dim, bool) or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    dim = int(dim)
    if name == "iso_quadratic":
        return _quadratic(name, np.ones(dim))
    if name == "aniso_quadratic":
        return _quadratic(name, np.arange(1, dim + 1, dtype=float) ** 2)
    if name == "shifted_double_well":
        return _double_well(dim)
    if name == "rosenbrock":
        if dim < 2:
            raise ValueError("rosenbrock requires dim >= 2")
        return _rosenbrock(dim)
    if name == "smoothed_ackley":
        return _smoothed_ackley(dim)
    raise ValueError(f"unknown objective {name!r}; expected one of {BUILTIN_NAMES}")
