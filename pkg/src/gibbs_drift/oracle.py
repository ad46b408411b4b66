"""Deterministic reference values for every Gibbs quantity.

Two independent routes are provided:

* tensor-grid trapezoid quadrature in ``d <= 3``, carried out entirely in the
  log domain on a box fitted to the integrand, with nested node doubling;
* closed-form Gaussian algebra for quadratic objectives ``f = 0.5 y^T A y``.

The trapezoid rule is spectrally accurate for smooth integrands that are
negligible on the box faces, which is what the box fitting guarantees.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import ncx2

from .gibbs_core import ControlParams, log_heat_kernel
from .objectives import ObjectiveSpec

logger = logging.getLogger(__name__)

__all__ = [
    "GridError",
    "QuadratureGrid",
    "DriftEvaluation",
    "DriftField",
    "build_grid",
    "evaluate_point",
    "evaluate_batch",
    "gaussian_closed_form",
    "gaussian_drift",
    "drift_three_ways",
    "eta_log_density",
    "eta_log_density_penalized",
    "transition_log_kernel",
    "chapman_kolmogorov",
    "partition_free_energy",
    "gibbs_grid",
    "gibbs_moments",
    "gibbs_cdf_1d",
    "gibbs_ball_mass",
    "transition_ball_mass",
    "free_diffusion_average",
    "eta_tail_log_mass",
    "barycenter_jacobian",
    "phi_gradient_fd",
    "phi_hessian_fd",
    "phi_hessians_fd",
    "hjb_residual",
    "moreau_prox",
]

DEFAULT_TOL = 1e-10
LOG_CUT_MARGIN = 40.0
MIN_NODES = 65
MAX_NODES_PER_AXIS = 2**13 + 1
MAX_TOTAL_NODES = 2**22
MAX_DIM = 3
_SCAN_NODES = {1: 257, 2: 129, 3: 41}
_CHUNK_ENTRIES = 2_000_000


class GridError(RuntimeError):
    """Quadrature could not reach the requested tolerance."""


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product trapezoid rule on an axis-aligned box.

    ``truncation_radius`` holds one half-width per axis.
    """

    dim: int
    nodes: tuple
    weights: tuple
    truncation_center: np.ndarray
    truncation_radius: np.ndarray
    neglected_mass_bound: float = 0.0

    @classmethod
    def trapezoid(cls, lo, hi, n: int, neglected_mass_bound: float = 0.0) -> "QuadratureGrid":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        nodes, weights = [], []
        for a, b in zip(lo, hi):
            x = np.linspace(a, b, n)
            w = np.full(n, (b - a) / (n - 1))
            w[0] *= 0.5
            w[-1] *= 0.5
            nodes.append(x)
            weights.append(w)
        return cls(
            dim=lo.size,
            nodes=tuple(nodes),
            weights=tuple(weights),
            truncation_center=0.5 * (lo + hi),
            truncation_radius=0.5 * (hi - lo),
            neglected_mass_bound=neglected_mass_bound,
        )

    @property
    def lower(self) -> np.ndarray:
        return self.truncation_center - self.truncation_radius

    @property
    def upper(self) -> np.ndarray:
        return self.truncation_center + self.truncation_radius

    @property
    def size(self) -> int:
        return int(np.prod([n.size for n in self.nodes]))

    @functools.cached_property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.nodes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @functools.cached_property
    def log_weights(self) -> np.ndarray:
        mesh = np.meshgrid(*[np.log(w) for w in self.weights], indexing="ij")
        return np.sum([m.ravel() for m in mesh], axis=0)

    def with_nodes(self, n: int) -> "QuadratureGrid":
        return QuadratureGrid.trapezoid(self.lower, self.upper, n, self.neglected_mass_bound)


def _tensor_points(nodes: Sequence[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*nodes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _chunks(m: int, n: int):
    step = max(1, _CHUNK_ENTRIES // max(n, 1))
    for i in range(0, m, step):
        yield slice(i, min(m, i + step))


def _fit_box(profile: Callable[[np.ndarray], np.ndarray], lo, hi, log_cut: float,
             fixed_lo=None, fixed_hi=None, max_iter: int = 60):
    """Fit an axis-aligned box to the region where ``profile > -log_cut``.

    ``profile`` maps scan points ``(n, d)`` to the normalized log integrand
    (0 at the maximum).  Faces carrying non-negligible mass are pushed out;
    afterwards the box is trimmed to the significant region plus two scan
    cells, repeating until it stops shrinking.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    d = lo.size
    fixed_lo = np.zeros(d, bool) if fixed_lo is None else np.asarray(fixed_lo, bool)
    fixed_hi = np.zeros(d, bool) if fixed_hi is None else np.asarray(fixed_hi, bool)
    n_scan = _SCAN_NODES[d]
    for _ in range(max_iter):
        nodes = [np.linspace(a, b, n_scan) for a, b in zip(lo, hi)]
        prof = profile(_tensor_points(nodes))
        prof = np.where(np.isfinite(prof), prof, -np.inf).reshape((n_scan,) * d)
        if not np.isfinite(prof.max()):
            raise GridError("integrand vanishes on the whole search box")
        prof = prof - prof.max()
        expanded = False
        for k in range(d):
            width = hi[k] - lo[k]
            if not fixed_lo[k] and np.take(prof, 0, axis=k).max() > -log_cut:
                lo[k] -= width
                expanded = True
            if not fixed_hi[k] and np.take(prof, -1, axis=k).max() > -log_cut:
                hi[k] += width
                expanded = True
        if expanded:
            if np.max(hi - lo) > 1e7:
                raise GridError("integrand does not decay; box grew without bound")
            continue
        new_lo, new_hi = lo.copy(), hi.copy()
        for k in range(d):
            other = tuple(j for j in range(d) if j != k)
            axis_prof = prof.max(axis=other) if other else prof
            keep = np.nonzero(axis_prof > -log_cut)[0]
            i0 = max(int(keep[0]) - 2, 0)
            i1 = min(int(keep[-1]) + 2, n_scan - 1)
            if not fixed_lo[k]:
                new_lo[k] = nodes[k][i0]
            if not fixed_hi[k]:
                new_hi[k] = nodes[k][i1]
        ratio = np.max((new_hi - new_lo) / (hi - lo))
        lo, hi = new_lo, new_hi
        if ratio > 0.8:
            return lo, hi
    return lo, hi


def _refine(lo, hi, stats: Callable[[QuadratureGrid], np.ndarray], tol: float,
            min_nodes: int = MIN_NODES):
    """Nested node doubling until two successive levels agree to ``tol``.

    ``stats`` returns a flat vector; agreement is ``|a - b| <= tol (1 + |b|)``.
    """
    d = np.size(lo)
    n = min_nodes
    prev = None
    while True:
        if n > MAX_NODES_PER_AXIS or n**d > MAX_TOTAL_NODES:
            raise GridError(
                f"quadrature did not reach tol={tol:g} within the node budget "
                f"({MAX_NODES_PER_AXIS - 1} per axis, {MAX_TOTAL_NODES} total)"
            )
        grid = QuadratureGrid.trapezoid(lo, hi, n)
        cur = np.asarray(stats(grid), dtype=float)
        if prev is not None and np.all(np.abs(cur - prev) <= tol * (1.0 + np.abs(cur))):
            return grid, cur
        prev = cur
        n = 2 * (n - 1) + 1


def _log_cut(tol: float) -> float:
    return float(np.log(1.0 / tol) + LOG_CUT_MARGIN)


def _check_dim(obj: ObjectiveSpec):
    if obj.dim > MAX_DIM:
        raise GridError(f"quadrature oracle supports dim <= {MAX_DIM}, got {obj.dim}")


# ---------------------------------------------------------------------------
# conditional terminal law: log integrand and moments


def _sq_dist(xs: np.ndarray, P: np.ndarray) -> np.ndarray:
    out = np.zeros((xs.shape[0], P.shape[0]))
    for k in range(xs.shape[1]):
        diff = xs[:, k, None] - P[None, :, k]
        out += diff * diff
    return out


def _log_integrand(obj, params, tau, xs, P, fP=None):
    """``log G_tau(x - y) - alpha f(y)`` for every row ``x`` and node ``y``."""
    beta = params.diffusivity_beta
    d = P.shape[1]
    if fP is None:
        fP = obj.value(P)
    return (-0.5 * d * np.log(4.0 * np.pi * beta * tau)
            - _sq_dist(xs, P) / (4.0 * beta * tau)
            - params.alpha * fP[None, :])


def _eta_profile(obj, params, tau, xs):
    def profile(P):
        fP = obj.value(P)
        best = np.full(P.shape[0], -np.inf)
        for sl in _chunks(xs.shape[0], P.shape[0]):
            L = _log_integrand(obj, params, tau, xs[sl], P, fP)
            L -= L.max(axis=1, keepdims=True)
            best = np.maximum(best, L.max(axis=0))
        return best
    return profile


@dataclass
class _Moments:
    log_D: np.ndarray          # (m,)  log of the heat-Gibbs integral
    mean: np.ndarray           # (m, d)
    cov: Optional[np.ndarray]  # (m, d, d)
    grad_mean: Optional[np.ndarray]  # (m, d)


def _eta_moments(obj, params, t, xs, grid: QuadratureGrid, cov=True, grad=False) -> _Moments:
    tau = params.remaining(t)
    P = grid.points
    lw = grid.log_weights
    fP = obj.value(P)
    gP = obj.gradient(P) if grad else None
    m, d = xs.shape
    log_D = np.empty(m)
    mean = np.empty((m, d))
    covs = np.empty((m, d, d)) if cov else None
    gmean = np.empty((m, d)) if grad else None
    per_row = P.shape[0] * (d if cov else 1)
    for sl in _chunks(m, per_row):
        L = _log_integrand(obj, params, tau, xs[sl], P, fP) + lw[None, :]
        lse = logsumexp(L, axis=1)
        W = np.exp(L - lse[:, None])
        log_D[sl] = lse
        mu = W @ P
        mean[sl] = mu
        if cov:
            C = np.empty((W.shape[0], d, d))
            for r in range(W.shape[0]):
                Dv = P - mu[r]
                C[r] = (Dv * W[r, :, None]).T @ Dv
            covs[sl] = 0.5 * (C + np.swapaxes(C, 1, 2))
        if grad:
            gmean[sl] = W @ gP
    return _Moments(log_D, mean, covs, gmean)


def build_grid(obj: ObjectiveSpec, params: ControlParams, t: float, x,
               tol: float = DEFAULT_TOL, log_cut: Optional[float] = None) -> QuadratureGrid:
    """Quadrature grid for the conditional terminal law seen from ``(t, x)``.

    ``x`` may be a single point or a batch ``(m, d)``; the returned grid is
    accurate to ``tol`` in ``log h`` and the barycenter for every row.
    """
    _check_dim(obj)
    tau = params.remaining(t)
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    if xs.shape[1] != obj.dim:
        raise ValueError(f"point dimension {xs.shape[1]} != objective dimension {obj.dim}")
    cut = _log_cut(tol) if log_cut is None else log_cut
    anchors = xs if obj.known_minimizer is None else np.vstack([xs, obj.known_minimizer])
    sigma_heat = np.sqrt(2.0 * params.diffusivity_beta * tau)
    sigma_gibbs = 1.0 / np.sqrt(params.alpha)
    pad = max(6.0 * sigma_heat, 6.0 * min(sigma_gibbs, obj.coercivity_radius_hint),
              np.sqrt(2.0 * cut) * sigma_heat)
    lo, hi = _fit_box(_eta_profile(obj, params, tau, xs),
                      anchors.min(axis=0) - pad, anchors.max(axis=0) + pad, cut)

    def stats(grid):
        mom = _eta_moments(obj, params, t, xs, grid, cov=False)
        return np.concatenate([mom.log_D, mom.mean.ravel()])

    grid, _ = _refine(lo, hi, stats, tol)
    return _with_neglected_mass(grid, obj, params, tau, xs)


def _with_neglected_mass(grid, obj, params, tau, xs):
    """Attach a face-mass estimate: the largest face value of the normalized
    integrand times the box volume."""
    P = grid.points
    L = _log_integrand(obj, params, tau, xs, P) + grid.log_weights[None, :]
    L = L - logsumexp(L, axis=1, keepdims=True)
    on_face = np.zeros(P.shape[0], bool)
    for k in range(grid.dim):
        on_face |= (P[:, k] == grid.nodes[k][0]) | (P[:, k] == grid.nodes[k][-1])
    cell = np.prod([w[1] for w in grid.weights])
    volume = np.prod(2.0 * grid.truncation_radius)
    bound = float(np.exp(L[:, on_face].max()) * volume / cell)
    return QuadratureGrid(grid.dim, grid.nodes, grid.weights, grid.truncation_center,
                          grid.truncation_radius, bound)


# ---------------------------------------------------------------------------
# partition function and Gibbs density


@functools.lru_cache(maxsize=256)
def _gibbs_grid_cached(obj: ObjectiveSpec, alpha_value: float, tol: float) -> QuadratureGrid:
    _check_dim(obj)
    cut = _log_cut(tol)
    d = obj.dim
    center = np.zeros(d) if obj.known_minimizer is None else np.asarray(obj.known_minimizer, float)
    R = obj.coercivity_radius_hint
    if obj.demo_only:
        # non-integrable tails: the partition function is truncated to the hint box
        lo, hi = center - R, center + R
        fixed = np.ones(d, bool)
    else:
        pad = R + np.sqrt(2.0 * cut / alpha_value) if alpha_value < 1.0 else 2.0 * R
        lo, hi = center - pad, center + pad
        fixed = np.zeros(d, bool)

    def profile(P):
        return -alpha_value * obj.value(P)

    lo, hi = _fit_box(profile, lo, hi, cut, fixed_lo=fixed, fixed_hi=fixed)

    def stats(grid):
        L = -alpha_value * obj.value(grid.points) + grid.log_weights
        lse = logsumexp(L)
        W = np.exp(L - lse)
        return np.concatenate([[lse], W @ grid.points])

    grid, _ = _refine(lo, hi, stats, tol)
    return grid


def gibbs_grid(obj: ObjectiveSpec, params: ControlParams, tol: float = DEFAULT_TOL) -> QuadratureGrid:
    """Quadrature grid resolving the Gibbs density ``exp(-alpha f)``."""
    return _gibbs_grid_cached(obj, float(params.alpha), float(tol))


@functools.lru_cache(maxsize=256)
def _log_partition_cached(obj, alpha_value, tol):
    grid = _gibbs_grid_cached(obj, alpha_value, tol)
    return float(logsumexp(-alpha_value * obj.value(grid.points) + grid.log_weights))


def partition_free_energy(obj: ObjectiveSpec, params: ControlParams,
                          tol: float = DEFAULT_TOL) -> tuple:
    """Return ``(log M, -(2 lambda beta / T) log M)``."""
    if obj.quadratic_matrix is not None:
        log_M = _gaussian_log_partition(obj.quadratic_matrix, params.alpha)
    else:
        log_M = _log_partition_cached(obj, float(params.alpha), float(tol))
    return log_M, -log_M / params.alpha


def gibbs_moments(obj: ObjectiveSpec, params: ControlParams, tol: float = DEFAULT_TOL):
    """Mean and covariance of the normalized Gibbs density."""
    grid = gibbs_grid(obj, params, tol)
    P = grid.points
    L = -params.alpha * obj.value(P) + grid.log_weights
    W = np.exp(L - logsumexp(L))
    mu = W @ P
    D = P - mu
    return mu, (D * W[:, None]).T @ D


def gibbs_cdf_1d(obj: ObjectiveSpec, params: ControlParams, tol: float = DEFAULT_TOL,
                 min_nodes: int = 8193) -> Callable[[np.ndarray], np.ndarray]:
    """CDF of the 1-d Gibbs density by cumulative trapezoid on the oracle grid."""
    if obj.dim != 1:
        raise ValueError("gibbs_cdf_1d requires a 1-d objective")
    grid = gibbs_grid(obj, params, tol)
    n = max(grid.nodes[0].size, min_nodes)
    y = np.linspace(grid.lower[0], grid.upper[0], n)
    logp = -params.alpha * obj.value(y[:, None])
    p = np.exp(logp - logp.max())
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(y))])
    cum /= cum[-1]

    def cdf(values):
        return np.interp(np.asarray(values, dtype=float), y, cum, left=0.0, right=1.0)
    return cdf


def gibbs_ball_mass(obj: ObjectiveSpec, params: ControlParams, radius: float,
                    center=None, tol: float = DEFAULT_TOL) -> float:
    """Gibbs probability of the closed ball of ``radius`` around ``center``
    (default: the known minimizer).

    The ball is integrated directly (Gauss-Legendre in 1-d, polar in 2-d) so
    its boundary is not cut by the tensor grid; 3-d falls back to the grid.
    """
    c = np.asarray(obj.known_minimizer if center is None else center, dtype=float).reshape(-1)
    al = params.alpha
    log_M, _ = partition_free_energy(obj, params, tol)
    logf = lambda P: -al * obj.value(P)  # noqa: E731
    qtol = max(tol, 1e-12)
    if obj.dim == 1:
        log_in = _gauss_legendre_log_integral(logf, c[0] - radius, c[0] + radius, qtol)
        return float(min(np.exp(log_in - log_M), 1.0))
    if obj.dim == 2:
        log_in = _polar_tail_log_integral(logf, c, 0.0, radius, qtol)
        return float(min(np.exp(log_in - log_M), 1.0))
    grid = gibbs_grid(obj, params, tol)
    fine = grid.with_nodes(max(grid.nodes[0].size, 129))
    P = fine.points
    L = -al * obj.value(P) + fine.log_weights
    inside = np.sum((P - c) ** 2, axis=1) <= radius**2
    if not inside.any():
        return 0.0
    return float(np.exp(logsumexp(L[inside]) - logsumexp(L)))


# ---------------------------------------------------------------------------
# point evaluations


@dataclass(frozen=True)
class DriftEvaluation:
    """Exact Gibbs quantities at one state ``(t, x)``."""

    t: float
    x: np.ndarray
    log_h: float
    phi: float
    value_V: float
    barycenter_a: np.ndarray
    drift_u: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class DriftField:
    """Batched :class:`DriftEvaluation` over rows of ``x``."""

    t: float
    x: np.ndarray
    log_h: np.ndarray
    phi: np.ndarray
    value_V: np.ndarray
    barycenter_a: np.ndarray
    drift_u: np.ndarray
    covariance: np.ndarray
    grad_mean: Optional[np.ndarray] = None

    def point(self, i: int) -> DriftEvaluation:
        return DriftEvaluation(
            t=self.t, x=self.x[i], log_h=float(self.log_h[i]), phi=float(self.phi[i]),
            value_V=float(self.value_V[i]), barycenter_a=self.barycenter_a[i],
            drift_u=self.drift_u[i], covariance=self.covariance[i],
        )


def _field_from_moments(obj, params, t, xs, mom: _Moments, tol) -> DriftField:
    tau = params.remaining(t)
    log_M, _ = partition_free_energy(obj, params, tol)
    log_h = mom.log_D - log_M
    return DriftField(
        t=float(t),
        x=xs,
        log_h=log_h,
        phi=-2.0 * params.diffusivity_beta * log_h,
        value_V=-mom.log_D / params.alpha,
        barycenter_a=mom.mean,
        drift_u=-(xs - mom.mean) / tau,
        covariance=mom.cov,
        grad_mean=mom.grad_mean,
    )


def evaluate_batch(obj: ObjectiveSpec, params: ControlParams, t: float, xs,
                   tol: float = DEFAULT_TOL, grid: Optional[QuadratureGrid] = None,
                   with_gradient: bool = False) -> DriftField:
    """Evaluate the exact drift, value and moments at every row of ``xs``
    from one shared quadrature grid (built when not given)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if grid is None:
        grid = build_grid(obj, params, t, xs, tol)
    mom = _eta_moments(obj, params, t, xs, grid, cov=True, grad=with_gradient)
    return _field_from_moments(obj, params, t, xs, mom, tol)


def evaluate_point(obj: ObjectiveSpec, params: ControlParams, t: float, x,
                   tol: float = DEFAULT_TOL,
                   grid: Optional[QuadratureGrid] = None) -> DriftEvaluation:
    """Exact :class:`DriftEvaluation` at ``(t, x)`` by quadrature."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return evaluate_batch(obj, params, t, x, tol, grid).point(0)


# ---------------------------------------------------------------------------
# closed form for quadratic objectives


def _check_spd(A) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1] or not np.allclose(A, A.T, rtol=0, atol=1e-12 * np.abs(A).max()):
        raise ValueError("A must be a symmetric matrix")
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError("A must be positive definite") from exc
    return A


def _gaussian_log_partition(A, alpha_value):
    d = A.shape[0]
    return 0.5 * d * np.log(2.0 * np.pi / alpha_value) - 0.5 * np.linalg.slogdet(A)[1]


def gaussian_closed_form(A, params: ControlParams, t: float, x) -> DriftEvaluation:
    """Exact evaluation for ``f(y) = 0.5 y^T A y``.

    With ``c = lambda / (T (T - t))`` the conditional terminal law is Gaussian
    with precision ``alpha (A + c I)`` and mean ``c (A + c I)^{-1} x``.
    """
    A = _check_spd(A)
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float).reshape(-1)
    d = A.shape[0]
    al = params.alpha
    beta = params.diffusivity_beta
    c = params.cost_lambda / (params.horizon_T * tau)
    B = A + c * np.eye(d)
    Binv = np.linalg.inv(B)
    mean = c * Binv @ x
    cov = Binv / al
    log_D = (-0.5 * d * np.log(4.0 * np.pi * beta * tau)
             + 0.5 * d * np.log(2.0 * np.pi / al)
             - 0.5 * np.linalg.slogdet(B)[1]
             - 0.5 * al * (c * x @ x - c * c * x @ Binv @ x))
    log_h = log_D - _gaussian_log_partition(A, al)
    return DriftEvaluation(
        t=float(t), x=x, log_h=float(log_h), phi=float(-2.0 * beta * log_h),
        value_V=float(-log_D / al), barycenter_a=mean, drift_u=-(x - mean) / tau,
        covariance=0.5 * (cov + cov.T),
    )


def gaussian_drift(A, params: ControlParams, t: float, xs) -> np.ndarray:
    """Vectorized closed-form drift for rows of ``xs``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    tau = params.remaining(t)
    c = params.cost_lambda / (params.horizon_T * tau)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    S = c * np.linalg.inv(A + c * np.eye(A.shape[0]))
    return -(xs - xs @ S.T) / tau


# ---------------------------------------------------------------------------
# derivatives by finite differences on a shared grid


def _x_step(x, base: float) -> float:
    return max(base, base * float(np.linalg.norm(x)))


def _stencil_grid(obj, params, t, pts, tol):
    return build_grid(obj, params, t, pts, tol)


def phi_gradient_fd(obj, params, t, x, tol=DEFAULT_TOL, step=1e-5):
    """Central finite-difference gradient of the regularized potential."""
    x = np.asarray(x, dtype=float)
    h = _x_step(x, step)
    d = x.size
    pts = np.vstack([x + h * e for e in np.eye(d)] + [x - h * e for e in np.eye(d)])
    grid = _stencil_grid(obj, params, t, pts, tol)
    log_D = _eta_moments(obj, params, t, pts, grid, cov=False).log_D
    # phi = -2 beta (log D - log M); the constant drops out of differences
    phi = -2.0 * params.diffusivity_beta * log_D
    return (phi[:d] - phi[d:]) / (2.0 * h)


def _second_stencil(x, h):
    d = x.size
    E = np.eye(d)
    pts = [x]
    for i in range(d):
        pts += [x + h * E[i], x - h * E[i]]
    for i in range(d):
        for j in range(i + 1, d):
            pts += [x + h * (E[i] + E[j]), x + h * (E[i] - E[j]),
                    x - h * (E[i] - E[j]), x - h * (E[i] + E[j])]
    return np.vstack(pts)


def _second_from_values(v, d, h):
    H = np.zeros((d, d))
    c = v[0]
    k = 1
    for i in range(d):
        H[i, i] = (v[k] - 2.0 * c + v[k + 1]) / h**2
        k += 2
    for i in range(d):
        for j in range(i + 1, d):
            H[i, j] = H[j, i] = (v[k] - v[k + 1] - v[k + 2] + v[k + 3]) / (4.0 * h * h)
            k += 4
    return H


def phi_hessian_fd(obj, params, t, x, tol=DEFAULT_TOL, step=1e-4):
    """Second-order central finite-difference Hessian of the potential."""
    return phi_hessians_fd(obj, params, t, np.asarray(x, dtype=float)[None], tol, step)[0]


def phi_hessians_fd(obj, params, t, xs, tol=DEFAULT_TOL, step=1e-4):
    """Finite-difference Hessians of the potential at every row of ``xs``,
    all stencils sharing one quadrature grid.  Returns ``(m, d, d)``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    steps = [_x_step(x, step) for x in xs]
    stencils = [_second_stencil(x, h) for x, h in zip(xs, steps)]
    pts = np.vstack(stencils)
    grid = _stencil_grid(obj, params, t, pts, tol)
    phi = -2.0 * params.diffusivity_beta * _eta_moments(obj, params, t, pts, grid, cov=False).log_D
    n = stencils[0].shape[0]
    return np.stack([_second_from_values(phi[i * n:(i + 1) * n], xs.shape[1], h)
                     for i, h in enumerate(steps)])


def barycenter_jacobian(obj, params, t, x, tol=DEFAULT_TOL, step=1e-5):
    """Return ``(J, Cov / (2 beta (T - t)))`` with ``J`` the central
    finite-difference Jacobian of the barycenter."""
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float)
    h = _x_step(x, step)
    d = x.size
    pts = np.vstack([x] + [x + h * e for e in np.eye(d)] + [x - h * e for e in np.eye(d)])
    grid = _stencil_grid(obj, params, t, pts, tol)
    mom = _eta_moments(obj, params, t, pts, grid, cov=True)
    J = (mom.mean[1:d + 1] - mom.mean[d + 1:]).T / (2.0 * h)
    return J, mom.cov[0] / (2.0 * params.diffusivity_beta * tau)


def hjb_residual(obj, params, t, x, tol=DEFAULT_TOL, t_step=1e-4, x_step=1e-4, grad_step=1e-5):
    """``dV/dt - (T / (2 lambda)) |grad V|^2 + beta lap V`` by finite differences."""
    x = np.asarray(x, dtype=float)
    d = x.size
    params.remaining(t + t_step)
    hx = _x_step(x, x_step)
    hg = _x_step(x, grad_step)
    lap_pts = _second_stencil(x, hx)[: 1 + 2 * d]
    grad_pts = np.vstack([x + hg * e for e in np.eye(d)] + [x - hg * e for e in np.eye(d)])
    pts = np.vstack([lap_pts, grad_pts])
    grid = build_grid(obj, params, t + t_step, pts, tol)
    V = lambda tt, P: -_eta_moments(obj, params, tt, P, grid, cov=False).log_D / params.alpha  # noqa: E731
    Vt = V(t, pts)
    dVdt = (V(t + t_step, x[None])[0] - V(t - t_step, x[None])[0]) / (2.0 * t_step)
    lap = sum(Vt[1 + 2 * i] - 2.0 * Vt[0] + Vt[2 + 2 * i] for i in range(d)) / hx**2
    gv = Vt[len(lap_pts):]
    grad = (gv[:d] - gv[d:]) / (2.0 * hg)
    T, lam, beta = params.horizon_T, params.cost_lambda, params.diffusivity_beta
    return float(dVdt - T / (2.0 * lam) * grad @ grad + beta * lap)


def drift_three_ways(obj: ObjectiveSpec, params: ControlParams, t: float, x,
                     tol: float = DEFAULT_TOL):
    """Return ``(u_potential, u_avg_grad, u_barycentric)`` at ``(t, x)``.

    The potential form differentiates the potential numerically; the other
    two are conditional expectations on the same quadrature grid.
    """
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float)
    h = _x_step(x, 1e-5)
    d = x.size
    pts = np.vstack([x] + [x + h * e for e in np.eye(d)] + [x - h * e for e in np.eye(d)])
    grid = build_grid(obj, params, t, pts, tol)
    mom = _eta_moments(obj, params, t, pts, grid, cov=False, grad=True)
    phi = -2.0 * params.diffusivity_beta * mom.log_D
    u_pot = -(phi[1:d + 1] - phi[d + 1:]) / (2.0 * h)
    u_grad = -(params.horizon_T / params.cost_lambda) * mom.grad_mean[0]
    u_bar = -(x - mom.mean[0]) / tau
    return u_pot, u_grad, u_bar


# ---------------------------------------------------------------------------
# densities and kernels


def eta_log_density(obj, params, t, x, y, tol=DEFAULT_TOL):
    """``log G_{T-t}(x - y) + log pi(y) - log h(t, x)``; ``y`` may be batched."""
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ev = evaluate_point(obj, params, t, x, tol)
    log_M, _ = partition_free_energy(obj, params, tol)
    log_pi = -params.alpha * obj.value(y) - log_M
    return log_heat_kernel(tau, x - y, params.diffusivity_beta) + log_pi - ev.log_h


def eta_log_density_penalized(obj, params, t, x, y, tol=DEFAULT_TOL):
    """Same density written as a Gibbs law of the penalized energy,
    ``-alpha E(y) - log Z`` with ``Z`` integrated on its own grid."""
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = build_grid(obj, params, t, x, tol)
    P = grid.points
    lam, T = params.cost_lambda, params.horizon_T

    def energy(Y):
        return obj.value(Y) + lam * np.sum((Y - x) ** 2, axis=-1) / (2.0 * T * tau)

    log_Z = logsumexp(-params.alpha * energy(P) + grid.log_weights)
    return -params.alpha * energy(y) - log_Z


def _log_h_rows(obj, params, s, ys, tol):
    if s >= params.horizon_T:
        log_M, _ = partition_free_energy(obj, params, tol)
        return -params.alpha * obj.value(ys) - log_M
    ys = np.atleast_2d(ys)
    # rows far apart would share one oversized union grid; chunk them
    return np.concatenate([evaluate_batch(obj, params, s, ys[i:i + 256], tol).log_h
                           for i in range(0, ys.shape[0], 256)])


def transition_log_kernel(obj, params, t, x, s, y, tol=DEFAULT_TOL):
    """Log transition density of the optimal process from ``(t, x)`` to ``(s, y)``."""
    if not s > t:
        raise ValueError(f"transition kernel requires s > t, got t={t!r}, s={s!r}")
    if s > params.horizon_T:
        raise ValueError("transition kernel requires s <= T")
    x = np.asarray(x, dtype=float).reshape(-1)
    ys = np.atleast_2d(np.asarray(y, dtype=float))
    log_h_tx = evaluate_point(obj, params, t, x, tol).log_h
    out = (log_heat_kernel(s - t, ys - x, params.diffusivity_beta)
           + _log_h_rows(obj, params, s, ys, tol) - log_h_tx)
    return out if np.ndim(y) > 1 else float(out[0])


def chapman_kolmogorov(obj, params, x, r, s, ys, tol=DEFAULT_TOL, t: float = 0.0):
    """Return ``(composed, direct)`` transition densities at each row of ``ys``.

    ``composed`` integrates ``p(t, x; r, z) p(r, z; s, y)`` over ``z`` by
    quadrature with every factor evaluated through the oracle.
    """
    _check_dim(obj)
    x = np.asarray(x, dtype=float).reshape(-1)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    beta = params.diffusivity_beta
    log_h_tx = evaluate_point(obj, params, t, x, tol).log_h
    log_h_sy = _log_h_rows(obj, params, s, ys, tol)

    def log_terms(Z):
        log_h_rz = evaluate_batch(obj, params, r, Z, tol).log_h
        first = log_heat_kernel(r - t, Z - x, beta) + log_h_rz - log_h_tx
        second = (log_heat_kernel(s - r, ys[:, None, :] - Z[None, :, :], beta)
                  + log_h_sy[:, None] - log_h_rz[None, :])
        return first[None, :] + second

    def profile(Z):
        L = log_terms(Z)
        return (L - L.max(axis=1, keepdims=True)).max(axis=0)

    cut = _log_cut(tol)
    sig = np.sqrt(2.0 * beta * s)
    anchors = np.vstack([x[None], ys])
    lo, hi = _fit_box(profile, anchors.min(0) - 6 * sig, anchors.max(0) + 6 * sig, cut)

    def stats(grid):
        return logsumexp(log_terms(grid.points) + grid.log_weights[None, :], axis=1)

    _, log_comp = _refine(lo, hi, stats, tol)
    direct = log_heat_kernel(s - t, ys - x, beta) + log_h_sy - log_h_tx
    return np.exp(log_comp), np.exp(direct)


def transition_ball_mass(obj, params, t, x, s, radius, center=None, tol=1e-10) -> float:
    """Probability that the optimal process started at ``(t, x)`` lies in the
    ball of ``radius`` around ``center`` at time ``s``.

    Integrating the intermediate point out of ``p*`` leaves an average over
    the conditional terminal law ``z ~ eta(t, x)`` of the probability that a
    Gaussian bridge point ``N(x + w (z - x), v I)`` with ``w = (s-t)/(T-t)``
    and ``v = 2 beta (s-t)(T-s)/(T-t)`` falls in the ball; that probability is
    a noncentral chi-square CDF.
    """
    T = params.horizon_T
    if not t < s <= T:
        raise ValueError(f"need t < s <= T, got t={t!r}, s={s!r}")
    c = np.asarray(obj.known_minimizer if center is None else center, dtype=float).reshape(-1)
    if s == T:
        return float(-np.expm1(eta_tail_log_mass(obj, params, t, x, radius, c, tol)))
    x = np.asarray(x, dtype=float).reshape(1, -1)
    tau = params.remaining(t)
    w = (s - t) / tau
    v = 2.0 * params.diffusivity_beta * (s - t) * (T - s) / tau
    grid = build_grid(obj, params, t, x, tol)
    # the bridge probability must be smooth on the node scale
    width = float(np.max(grid.upper - grid.lower))
    n = int(np.ceil(4.0 * w * width / np.sqrt(v))) + 1
    if n > grid.nodes[0].size:
        cap = min(MAX_NODES_PER_AXIS, int(MAX_TOTAL_NODES ** (1.0 / obj.dim)))
        if n > cap:
            logger.warning("transition_ball_mass: s too close to T for the node budget")
        grid = grid.with_nodes(min(n, cap))
    P = grid.points
    L = _log_integrand(obj, params, tau, x, P)[0] + grid.log_weights
    W = np.exp(L - logsumexp(L))
    sq = np.sum((x[0] + w * (P - x[0]) - c) ** 2, axis=1)
    inside = ncx2.cdf(radius**2 / v, df=obj.dim, nc=sq / v)
    return float(np.clip(W @ inside, 0.0, 1.0))


def free_diffusion_average(obj, params, t, x, tol=DEFAULT_TOL) -> float:
    """Heat-kernel average ``(G_{T-t} * f)(x)`` by quadrature."""
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float).reshape(-1)
    beta = params.diffusivity_beta
    cut = _log_cut(tol)
    pad = np.sqrt(2.0 * cut) * np.sqrt(2.0 * beta * tau)
    lo, hi = x - pad, x + pad

    def stats(grid):
        P = grid.points
        L = log_heat_kernel(tau, P - x, beta) + grid.log_weights
        W = np.exp(L - L.max())
        return np.array([np.dot(W, obj.value(P)) / W.sum()])

    _, val = _refine(lo, hi, stats, tol)
    return float(val[0])


def eta_tail_log_mass(obj, params, t, x, radius, center=None, tol=1e-10) -> float:
    """Log of the conditional-terminal-law mass outside the ball of
    ``radius`` around ``center`` (default: the known minimizer).

    In 1-d the two half-lines are integrated on separate fitted intervals with
    an endpoint on the ball boundary; in 2-d the exterior is integrated in
    polar coordinates around ``center``.
    """
    _check_dim(obj)
    if obj.dim > 2:
        raise GridError("tail masses are supported for dim <= 2")
    tau = params.remaining(t)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    c = np.asarray(obj.known_minimizer if center is None else center, dtype=float).reshape(-1)
    cut = _log_cut(tol)
    log_D_total = _eta_moments(obj, params, t, x, build_grid(obj, params, t, x, tol), cov=False).log_D[0]
    base_profile = _eta_profile(obj, params, tau, x)
    sig = np.sqrt(2.0 * params.diffusivity_beta * tau)
    span = max(obj.coercivity_radius_hint, np.sqrt(2.0 * cut) * sig) + abs(float(x[0, 0] - c[0]))

    logf = lambda P: _log_integrand(obj, params, tau, x, P)[0]  # noqa: E731

    def piece_log_mass(lo, hi, fixed_lo, fixed_hi):
        lo, hi = _fit_box(base_profile, lo, hi, cut, fixed_lo=fixed_lo, fixed_hi=fixed_hi)
        # the integrand peaks on the fixed endpoint, where the trapezoid
        # rule is only second order; Gauss-Legendre panels are used instead
        return _gauss_legendre_log_integral(logf, lo[0], hi[0], max(tol, 1e-12))

    if obj.dim == 1:
        left = piece_log_mass([c[0] - radius - span], [c[0] - radius], [False], [True])
        right = piece_log_mass([c[0] + radius], [c[0] + radius + span], [True], [False])
        log_tail = np.logaddexp(left, right)
    else:
        outer = radius + span + float(np.linalg.norm(x[0] - c))
        log_tail = _polar_tail_log_integral(logf, c, radius, outer, max(tol, 1e-12))
    return float(min(log_tail - log_D_total, 0.0))


def _gauss_legendre_log_integral(logf, a: float, b: float, tol: float,
                                 order: int = 16, max_panels: int = 2**14) -> float:
    """Log of a 1-d integral by composite Gauss-Legendre panels, doubling the
    panel count until the log integral changes by at most ``tol``."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    panels = 8
    prev = None
    while panels <= max_panels:
        edges = np.linspace(a, b, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        pts = (mid[:, None] + half[:, None] * xg[None, :]).reshape(-1, 1)
        lw = (np.log(half)[:, None] + np.log(wg)[None, :]).ravel()
        cur = float(logsumexp(logf(pts) + lw))
        if prev is not None and abs(cur - prev) <= tol * (1.0 + abs(cur)):
            return cur
        prev = cur
        panels *= 2
    raise GridError(f"Gauss-Legendre panels did not reach tol={tol:g}")


def _polar_tail_log_integral(logf, c, r0: float, r1: float, tol: float,
                             order: int = 16, max_level: int = 9) -> float:
    """Log of a 2-d integral over the annulus ``r0 <= |y - c| <= r1``:
    Gauss-Legendre panels in the radius, periodic trapezoid in the angle."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    prev = None
    panels, n_theta = 8, 64
    for _ in range(max_level):
        edges = np.linspace(r0, r1, panels + 1)
        half = 0.5 * np.diff(edges)
        rho = (0.5 * (edges[1:] + edges[:-1])[:, None] + half[:, None] * xg[None, :]).ravel()
        lw_rho = (np.log(half)[:, None] + np.log(wg)[None, :]).ravel() + np.log(rho)
        theta = np.arange(n_theta) * (2.0 * np.pi / n_theta)
        R, TH = np.meshgrid(rho, theta, indexing="ij")
        pts = np.stack([c[0] + (R * np.cos(TH)).ravel(), c[1] + (R * np.sin(TH)).ravel()], axis=-1)
        lw = (lw_rho[:, None] + np.log(2.0 * np.pi / n_theta)).repeat(n_theta, axis=1).ravel()
        cur = float(logsumexp(logf(pts) + lw))
        if prev is not None and abs(cur - prev) <= tol * (1.0 + abs(cur)):
            return cur
        prev = cur
        panels *= 2
        n_theta *= 2
    raise GridError(f"polar quadrature did not reach tol={tol:g}")


# ---------------------------------------------------------------------------
# deterministic warm-up


def moreau_prox(obj: ObjectiveSpec, params: ControlParams, x0, tol: float = 1e-12):
    """Global minimizer of ``f(y) + lambda |y - x0|^2 / (2 T^2)``.

    Coarse tensor-grid scan of the truncation box (ties go to the smallest
    flat index), then Newton polish of the stationarity equation.  If Newton
    fails to improve on the best grid point, that grid point is returned.

    Returns
    -------
    tuple
        ``(y_opt, envelope_value)``; the optimal constant control is
        ``(y_opt - x0) / T``.
    """
    _check_dim(obj)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    mu = params.cost_lambda / params.horizon_T**2
    anchors = x0[None] if obj.known_minimizer is None else np.vstack([x0, obj.known_minimizer])
    pad = obj.coercivity_radius_hint + 1.0
    lo, hi = anchors.min(0) - pad, anchors.max(0) + pad
    n = {1: 20001, 2: 1001, 3: 101}[obj.dim]
    P = _tensor_points([np.linspace(a, b, n) for a, b in zip(lo, hi)])

    def prox(Y):
        return obj.value(Y) + 0.5 * mu * np.sum((Y - x0) ** 2, axis=-1)

    vals = prox(P)
    y_grid = P[int(np.argmin(vals))].copy()
    v_grid = float(vals.min())
    y = y_grid.copy()
    eye = np.eye(obj.dim)
    converged = False
    for _ in range(100):
        g = obj.gradient(y) + mu * (y - x0)
        H = obj.hessian(y) + mu * eye
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        y = y - step
        if np.linalg.norm(step) <= tol * (1.0 + np.linalg.norm(y)):
            converged = True
            break
    v = float(prox(y))
    if not converged or not np.all(np.isfinite(y)) or v > v_grid:
        logger.warning("moreau_prox: Newton polish failed; returning best grid point")
        return y_grid, v_grid
    return y, v
