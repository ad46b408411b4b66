"""Control parameters, heat kernel, Gibbs weights and log-domain helpers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .objectives import ObjectiveSpec

__all__ = [
    "ControlParams",
    "alpha",
    "log_heat_kernel",
    "penalized_energy",
    "log_weight",
    "log_sum_exp",
]


@dataclass(frozen=True)
class ControlParams:
    """Horizon ``T``, diffusivity ``beta``, cost weight ``lambda`` and the
    integrator stopping offset ``delta`` (defaults to ``0.01 * T``)."""

    horizon_T: float = 1.0
    diffusivity_beta: float = 0.5
    cost_lambda: float = 0.5
    terminal_offset_delta: Optional[float] = None

    def __post_init__(self):
        if self.terminal_offset_delta is None:
            object.__setattr__(self, "terminal_offset_delta", 0.01 * self.horizon_T)
        for name in ("horizon_T", "diffusivity_beta", "cost_lambda", "terminal_offset_delta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be strictly positive, got {v!r}")
        if self.terminal_offset_delta >= self.horizon_T:
            raise ValueError("terminal_offset_delta must be smaller than horizon_T")

    @property
    def alpha(self) -> float:
        return self.horizon_T / (2.0 * self.cost_lambda * self.diffusivity_beta)

    @property
    def temperature(self) -> float:
        return 2.0 * self.cost_lambda * self.diffusivity_beta / self.horizon_T

    def search_radius(self, t: float) -> float:
        """Gaussian scale ``sqrt(2 beta (T - t))`` of the terminal averaging."""
        return float(np.sqrt(2.0 * self.diffusivity_beta * (self.horizon_T - t)))

    def with_lambda(self, cost_lambda: float) -> "ControlParams":
        return dataclasses.replace(self, cost_lambda=float(cost_lambda))

    def remaining(self, t: float) -> float:
        """``T - t``, raising when ``t`` is not strictly before the horizon."""
        tau = self.horizon_T - t
        if not tau > 0:
            raise ValueError(f"t must satisfy t < T={self.horizon_T}, got t={t!r}")
        return tau


def alpha(params: ControlParams) -> float:
    """Inverse temperature ``T / (2 lambda beta)``."""
    return params.alpha


def log_heat_kernel(r: float, z, beta: float):
    """Log of the heat kernel with diffusivity ``beta`` at time ``r``.

    ``z`` has shape ``(..., d)``; the result has shape ``(...)``.
    """
    if not r > 0:
        raise ValueError(f"heat kernel time must be positive, got {r!r}")
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z[None]
    d = z.shape[-1]
    return -0.5 * d * np.log(4.0 * np.pi * beta * r) - np.sum(z * z, axis=-1) / (4.0 * beta * r)


def penalized_energy(obj: ObjectiveSpec, params: ControlParams, t: float, x, y):
    """``f(y) + lambda |y - x|^2 / (2 T (T - t))``; ``y`` may be batched."""
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sq = np.sum((y - x) ** 2, axis=-1)
    return obj.value(y) + params.cost_lambda * sq / (2.0 * params.horizon_T * tau)


def log_weight(obj: ObjectiveSpec, params: ControlParams, t: float, x, y):
    """Unnormalized log weight of a terminal candidate ``y`` seen from ``(t, x)``."""
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sq = np.sum((y - x) ** 2, axis=-1)
    return -params.alpha * obj.value(y) - sq / (4.0 * params.diffusivity_beta * tau)


def log_sum_exp(values, axis=None):
    """Max-shifted ``log(sum(exp(values)))``; rejects empty input."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    out = logsumexp(values, axis=axis)
    return float(out) if np.ndim(out) == 0 else out
