"""Gradient-free Monte-Carlo drift and samplers for the Gibbs density.

The barycenter of the conditional terminal law is estimated by drawing
candidates from the free heat kernel around ``x`` and reweighting them with
``exp(-alpha f)``, self-normalized in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .gibbs_core import ControlParams
from .objectives import ObjectiveSpec
from . import oracle

__all__ = [
    "LOW_ESS_THRESHOLD",
    "substream",
    "WeightedSample",
    "BarycenterEstimate",
    "GibbsDraws",
    "draw_weighted_samples",
    "effective_sample_size",
    "mc_barycenter",
    "approx_drift",
    "mc_barycenter_batch",
    "sample_pi_lambda",
    "sample_h0",
]

LOW_ESS_THRESHOLD = 10.0


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the substream ``key`` of ``master_seed``.

    Streams with different keys are statistically independent and do not
    depend on the order in which they are created.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class WeightedSample:
    """Terminal candidates ``points`` (N, d) with log-weights ``-alpha f``."""

    points: np.ndarray
    log_weights: np.ndarray

    def normalized_weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))


@dataclass(frozen=True)
class BarycenterEstimate:
    estimate: np.ndarray
    effective_sample_size: float
    n_samples: int

    @property
    def low_ess(self) -> bool:
        return self.effective_sample_size < LOW_ESS_THRESHOLD


@dataclass(frozen=True)
class GibbsDraws:
    """Rejection-sampler output: ``points`` (n, d), the observed acceptance
    rate and the log envelope constant finally used."""

    points: np.ndarray
    acceptance_rate: float
    log_envelope: float


def _check_n(N):
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"sample size must be a positive integer, got {N!r}")


def effective_sample_size(log_weights) -> float:
    """``1 / sum(w_j^2)`` for the normalized weights; lies in ``[1, N]``."""
    lw = np.asarray(log_weights, dtype=float)
    w = np.exp(lw - logsumexp(lw))
    return float(1.0 / np.sum(w * w))


def draw_weighted_samples(obj: ObjectiveSpec, params: ControlParams, t: float, x,
                          N: int, rng: np.random.Generator) -> WeightedSample:
    """Draw ``Y ~ N(x, 2 beta (T - t) I)`` and attach ``-alpha f(Y)``."""
    tau = params.remaining(t)
    _check_n(N)
    x = np.asarray(x, dtype=float).reshape(-1)
    Y = x + np.sqrt(2.0 * params.diffusivity_beta * tau) * rng.standard_normal((N, x.size))
    lw = -params.alpha * obj.value(Y)
    if not np.all(np.isfinite(lw)):
        raise FloatingPointError("objective returned a non-finite value on a candidate")
    return WeightedSample(Y, lw)


def mc_barycenter(obj: ObjectiveSpec, params: ControlParams, t: float, x, N: int,
                  rng: np.random.Generator) -> BarycenterEstimate:
    """Self-normalized importance-sampling estimate of the barycenter."""
    s = draw_weighted_samples(obj, params, t, x, N, rng)
    w = s.normalized_weights()
    return BarycenterEstimate(w @ s.points, float(1.0 / np.sum(w * w)), int(N))


def approx_drift(obj: ObjectiveSpec, params: ControlParams, t: float, x, N: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo drift ``-(x - a_N) / (T - t)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    est = mc_barycenter(obj, params, t, x, N, rng)
    return -(x - est.estimate) / params.remaining(t)


def mc_barycenter_batch(obj: ObjectiveSpec, params: ControlParams, t: float, xs,
                        N: int, rngs: Sequence[np.random.Generator]):
    """Row-wise :func:`mc_barycenter` with one generator per row.

    Returns ``(estimates (m, d), ess (m,))``; row ``i`` uses the same draws as
    ``mc_barycenter(..., xs[i], N, rngs[i])`` and agrees with it to rounding.
    """
    tau = params.remaining(t)
    _check_n(N)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    m, d = xs.shape
    if len(rngs) != m:
        raise ValueError("need one generator per row")
    scale = np.sqrt(2.0 * params.diffusivity_beta * tau)
    Y = np.stack([r.standard_normal((N, d)) for r in rngs]) * scale + xs[:, None, :]
    lw = -params.alpha * obj.value(Y)
    if not np.all(np.isfinite(lw)):
        raise FloatingPointError("objective returned a non-finite value on a candidate")
    w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
    est = np.einsum("mn,mnd->md", w, Y)
    return est, 1.0 / np.sum(w * w, axis=1)


# ---------------------------------------------------------------------------
# exact samplers


_INFLATIONS = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0)
_LOG_TEN = float(np.log(10.0))
_LOG_SAFETY = float(np.log(1.1))


def _gaussian_logpdf(Y, mean, chol):
    z = np.linalg.solve(chol, (Y - mean).T).T
    d = mean.size
    return (-0.5 * np.sum(z * z, axis=1) - 0.5 * d * np.log(2.0 * np.pi)
            - np.sum(np.log(np.diag(chol))))


def sample_pi_lambda(obj: ObjectiveSpec, params: ControlParams, n: int,
                     rng: np.random.Generator, tol: float = 1e-10,
                     batch: Optional[int] = None) -> GibbsDraws:
    """Exact draws from the Gibbs density by Gaussian-envelope rejection.

    The proposal is ``N(mu, s^2 Sigma)`` with ``(mu, Sigma)`` the Gibbs moments
    from the oracle grid and ``s`` chosen from a fixed ladder to minimize the
    envelope constant evaluated on that grid, times a 1.1 safety factor.  A
    proposal exceeding the envelope triggers one restart with the constant
    inflated tenfold; a second violation raises ``RuntimeError``.
    """
    if obj.dim > 2:
        raise ValueError("sample_pi_lambda supports dim <= 2")
    if not isinstance(n, (int, np.integer)) or n < 0:
        raise ValueError(f"n must be a non-negative integer, got {n!r}")
    d = obj.dim
    if n == 0:
        return GibbsDraws(np.empty((0, d)), float("nan"), float("nan"))
    al = params.alpha
    grid = oracle.gibbs_grid(obj, params, tol)
    P = grid.points
    f_ref = float(np.min(obj.value(P)))
    log_target = lambda Y: -al * (obj.value(Y) - f_ref)  # noqa: E731
    mu, Sigma = oracle.gibbs_moments(obj, params, tol)
    lt_grid = log_target(P)
    best = None
    for s in _INFLATIONS:
        chol = np.linalg.cholesky(s * s * Sigma)
        log_env = float(np.max(lt_grid - _gaussian_logpdf(P, mu, chol)))
        if best is None or log_env < best[1]:
            best = (chol, log_env)
    chol, log_env = best
    # the supremum can fall between grid nodes
    log_env += _LOG_SAFETY
    batch = batch or max(1024, 2 * n)

    for attempt in range(2):
        out, proposed, accepted, violated = [], 0, 0, False
        while accepted < n:
            Y = mu + rng.standard_normal((batch, d)) @ chol.T
            log_ratio = log_target(Y) - _gaussian_logpdf(Y, mu, chol) - log_env
            if np.any(log_ratio > 0.0):
                violated = True
                break
            keep = np.log(rng.random(batch)) < log_ratio
            out.append(Y[keep])
            proposed += batch
            accepted += int(keep.sum())
        if not violated:
            pts = np.concatenate(out)[:n]
            return GibbsDraws(pts, accepted / proposed, log_env)
        log_env += _LOG_TEN
    raise RuntimeError("rejection envelope violated after tenfold inflation")


def sample_h0(obj: ObjectiveSpec, params: ControlParams, n: int,
              rng: np.random.Generator, tol: float = 1e-10) -> np.ndarray:
    """Draws from ``h(0, .) = G_T * pi``: a Gibbs draw plus heat noise."""
    draws = sample_pi_lambda(obj, params, n, rng, tol)
    noise = rng.standard_normal(draws.points.shape)
    return draws.points + np.sqrt(2.0 * params.diffusivity_beta * params.horizon_T) * noise
