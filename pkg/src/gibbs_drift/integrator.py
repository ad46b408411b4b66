"""Euler-Maruyama simulation of the controlled diffusion.

``X_{k+1} = X_k + h u(t_k, X_k) + sqrt(2 beta h) xi_k`` on ``t_k = k h``,
stopped at the last grid time not exceeding ``T - delta``.

Random streams: trajectory ``i`` draws all its step noises from substream
``(i, 0)`` of the master seed, so trajectory ``i`` is the same whether it is
run alone or inside an ensemble.  Monte-Carlo drift candidates at step ``k``
come from substream ``(i, 1, k)`` (``(i, 2, k)`` for the enlarged retry).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import oracle, sampler
from .gibbs_core import ControlParams
from .objectives import ObjectiveSpec

logger = logging.getLogger(__name__)

__all__ = [
    "PROVIDER_KINDS",
    "DriftProvider",
    "DriftProviderError",
    "EnsembleError",
    "TrajectoryRecord",
    "EnsembleResult",
    "step_count",
    "em_run",
    "em_ensemble",
    "summarize",
]

PROVIDER_KINDS = ("oracle", "monte_carlo", "affine_limit", "langevin_baseline", "zero")
INIT_MODES = ("point", "h0_sampler", "point_cloud")
_INIT_STREAM_KEY = 1 << 62
_NOISE_BUDGET = 20_000_000
CLAMP_FACTOR = 10.0


class DriftProviderError(RuntimeError):
    """Drift evaluation failed; ``step`` is the Euler-Maruyama step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"drift provider failed at step {step}: {cause}")
        self.step = step


class EnsembleError(RuntimeError):
    """Every trajectory failed (or none was requested); ``result`` holds
    whatever was recorded."""

    def __init__(self, message: str, result: "EnsembleResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class DriftProvider:
    """Drift field used by the integrator.

    Parameters
    ----------
    kind : str
        One of :data:`PROVIDER_KINDS`.
    tol : float
        Quadrature tolerance of the oracle drift.
    n_samples : int
        Candidates per Monte-Carlo barycenter.
    target : array_like, optional
        Attractor of the affine field; defaults to the known minimizer.
    clamp : bool, optional
        Cap ``|h u|`` at ``10 sqrt(2 beta h)``.  Defaults to on for the
        Monte-Carlo drift only.
    ess_retry : bool
        Re-estimate rows with ESS below the threshold once with ``4 N``.
    """

    kind: str = "oracle"
    tol: float = 1e-10
    n_samples: int = 1000
    target: Optional[np.ndarray] = None
    clamp: Optional[bool] = None
    ess_retry: bool = True

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown drift provider {self.kind!r}; expected one of {PROVIDER_KINDS}")
        if self.kind == "monte_carlo" and (int(self.n_samples) != self.n_samples or self.n_samples < 1):
            raise ValueError("monte_carlo provider needs n_samples >= 1")

    @property
    def clamps(self) -> bool:
        return self.kind == "monte_carlo" if self.clamp is None else bool(self.clamp)

    def resolve_target(self, obj: ObjectiveSpec) -> np.ndarray:
        target = self.target if self.target is not None else obj.known_minimizer
        if target is None:
            raise ValueError("affine_limit provider needs a target point or a known minimizer")
        return np.asarray(target, dtype=float).reshape(obj.dim)

    def evaluate(self, obj: ObjectiveSpec, params: ControlParams, t: float, X: np.ndarray,
                 master_seed: int = 0, indices=None, step: int = 0):
        """Drift at every row of ``X``; returns ``(U, ess)`` where ``ess`` is
        NaN except for the Monte-Carlo provider."""
        m = X.shape[0]
        ess = np.full(m, np.nan)
        if self.kind == "zero":
            return np.zeros_like(X), ess
        if self.kind == "langevin_baseline":
            return -(params.horizon_T / params.cost_lambda) * obj.gradient(X), ess
        tau = params.remaining(t)
        if self.kind == "affine_limit":
            return -(X - self.resolve_target(obj)) / tau, ess
        if self.kind == "oracle":
            if obj.quadratic_matrix is not None:
                return oracle.gaussian_drift(obj.quadratic_matrix, params, t, X), ess
            field_ = oracle.evaluate_batch(obj, params, t, X, self.tol)
            return field_.drift_u, ess
        # monte_carlo
        indices = np.arange(m) if indices is None else indices
        N = int(self.n_samples)
        rngs = [sampler.substream(master_seed, i, 1, step) for i in indices]
        est, ess = sampler.mc_barycenter_batch(obj, params, t, X, N, rngs)
        low = np.nonzero(ess < sampler.LOW_ESS_THRESHOLD)[0]
        if self.ess_retry and low.size:
            rngs = [sampler.substream(master_seed, indices[j], 2, step) for j in low]
            est[low], ess[low] = sampler.mc_barycenter_batch(obj, params, t, X[low], 4 * N, rngs)
        return -(X - est) / tau, ess


@dataclass
class TrajectoryRecord:
    """One Euler-Maruyama path.

    Without ``keep_paths`` only the initial and terminal states are stored
    (``times`` then has two entries) and ``drifts`` is ``None``.
    """

    seed: int
    index: int
    times: np.ndarray
    states: np.ndarray
    drifts: Optional[np.ndarray]
    terminal_state: np.ndarray
    best_f_seen: float
    f_terminal: float
    n_clamped: int = 0
    min_ess: float = float("nan")
    mean_ess: float = float("nan")
    failed: bool = False
    diagnostic: str = ""


@dataclass
class EnsembleResult:
    records: list
    summary: dict = field(default_factory=dict)


def step_count(params: ControlParams, h: float) -> int:
    """Number of steps ``K`` with ``K h <= T - delta``; validates ``h``."""
    T, delta = params.horizon_T, params.terminal_offset_delta
    if not (np.isfinite(h) and h > 0):
        raise ValueError(f"step h must be positive, got {h!r}")
    if h > (T - delta) / 4.0 * (1 + 1e-12):
        raise ValueError(f"step h={h} exceeds (T - delta)/4 = {(T - delta) / 4}")
    if h > delta / 4.0 * (1 + 1e-12):
        raise ValueError(f"step h={h} exceeds delta/4 = {delta / 4}")
    return int(math.floor((T - delta) / h + 1e-9))


def _simulate(obj, params, provider, X0, h, master_seed, indices, keep_paths):
    """Vectorized Euler-Maruyama for the rows of ``X0``; returns records."""
    K = step_count(params, h)
    m, d = X0.shape
    beta = params.diffusivity_beta
    noise_scale = math.sqrt(2.0 * beta * h)
    cap = CLAMP_FACTOR * noise_scale
    noise = np.stack([sampler.substream(master_seed, i, 0).standard_normal((K, d)) for i in indices])
    X = X0.copy()
    f0 = obj.value(X)
    best = f0.copy()
    alive = np.isfinite(f0) & np.all(np.isfinite(X), axis=1)
    fail_step = np.where(alive, -1, 0)
    diag = ["" if a else "non-finite initial state" for a in alive]
    n_clamped = np.zeros(m, dtype=np.int64)
    ess_min = np.full(m, np.inf)
    ess_sum = np.zeros(m)
    ess_cnt = np.zeros(m)
    paths = np.empty((m, K + 1, d)) if keep_paths else None
    drifts = np.empty((m, K, d)) if keep_paths else None
    if keep_paths:
        paths[:, 0] = X
    for k in range(K):
        t = k * h
        rows = np.nonzero(alive)[0]
        if rows.size == 0:
            break
        try:
            U, ess = provider.evaluate(obj, params, t, X[rows], master_seed, indices[rows], k)
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            raise DriftProviderError(k, exc) from exc
        inc = h * U
        if provider.clamps:
            norm = np.linalg.norm(inc, axis=1)
            over = norm > cap
            if over.any():
                inc[over] *= (cap / norm[over])[:, None]
                n_clamped[rows[over]] += 1
        Xn = X[rows] + inc + noise_scale * noise[rows, k]
        fn = obj.value(Xn)
        ok = np.all(np.isfinite(Xn), axis=1) & np.isfinite(fn)
        for j in rows[~ok]:
            diag[j] = f"non-finite state at step {k + 1}"
            fail_step[j] = k + 1
        has_ess = np.isfinite(ess)
        ess_min[rows[has_ess]] = np.minimum(ess_min[rows[has_ess]], ess[has_ess])
        ess_sum[rows[has_ess]] += ess[has_ess]
        ess_cnt[rows[has_ess]] += 1
        if keep_paths:
            drifts[rows, k] = U
        good = rows[ok]
        X[good] = Xn[ok]
        best[good] = np.minimum(best[good], fn[ok])
        alive[rows[~ok]] = False
        if keep_paths:
            paths[good, k + 1] = Xn[ok]
            paths[rows[~ok], k + 1:] = np.nan
    times_full = np.arange(K + 1) * h
    records = []
    for j, i in enumerate(indices):
        failed = fail_step[j] >= 0
        if keep_paths:
            times, states, dr = times_full, paths[j], drifts[j]
        else:
            times = np.array([0.0, times_full[-1]])
            states = np.stack([X0[j], X[j]])
            dr = None
        records.append(TrajectoryRecord(
            seed=int(master_seed),
            index=int(i),
            times=times,
            states=states,
            drifts=dr,
            terminal_state=X[j].copy(),
            best_f_seen=float(best[j]),
            f_terminal=float(obj.value(X[j])),
            n_clamped=int(n_clamped[j]),
            min_ess=float(ess_min[j]) if ess_cnt[j] else float("nan"),
            mean_ess=float(ess_sum[j] / ess_cnt[j]) if ess_cnt[j] else float("nan"),
            failed=bool(failed),
            diagnostic=diag[j],
        ))
    return records


def em_run(obj: ObjectiveSpec, params: ControlParams, provider: DriftProvider, x0,
           h: float, master_seed: int, trajectory_index: int = 0,
           keep_paths: bool = True) -> TrajectoryRecord:
    """Simulate a single seeded trajectory from ``x0``."""
    x0 = np.asarray(x0, dtype=float).reshape(1, obj.dim)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    return _simulate(obj, params, provider, x0, h, master_seed,
                     np.array([trajectory_index]), keep_paths)[0]


def _initial_states(obj, params, init, n_traj, master_seed, x0, cloud, tol):
    if init == "point":
        if x0 is None:
            raise ValueError("init='point' needs x0")
        x0 = np.asarray(x0, dtype=float).reshape(1, obj.dim)
        return np.repeat(x0, n_traj, axis=0)
    if init == "h0_sampler":
        rng = sampler.substream(master_seed, _INIT_STREAM_KEY)
        return sampler.sample_h0(obj, params, n_traj, rng, tol)
    if init == "point_cloud":
        if cloud is None:
            raise ValueError("init='point_cloud' needs a point cloud")
        cloud = np.asarray(cloud, dtype=float).reshape(-1, obj.dim)
        if cloud.shape[0] != n_traj:
            raise ValueError(f"point cloud has {cloud.shape[0]} rows, expected {n_traj}")
        return cloud.copy()
    raise ValueError(f"unknown init mode {init!r}; expected one of {INIT_MODES}")


def em_ensemble(obj: ObjectiveSpec, params: ControlParams, provider: DriftProvider,
                init: str, h: float, n_traj: int, master_seed: int, x0=None,
                cloud=None, keep_paths: bool = False, success_radius: float = 0.3,
                chunk: Optional[int] = None) -> EnsembleResult:
    """Run ``n_traj`` independent trajectories and summarize them.

    Raises
    ------
    EnsembleError
        If every trajectory failed.
    """
    if not isinstance(n_traj, (int, np.integer)) or n_traj < 0:
        raise ValueError(f"n_traj must be a non-negative integer, got {n_traj!r}")
    K = step_count(params, h)
    if n_traj == 0:
        return EnsembleResult([], summarize([], obj, success_radius))
    X0 = _initial_states(obj, params, init, n_traj, master_seed, x0, cloud, provider.tol)
    if chunk is None:
        chunk = int(max(1, min(2048, _NOISE_BUDGET // max(1, K * obj.dim))))
    records = []
    for start in range(0, n_traj, chunk):
        idx = np.arange(start, min(n_traj, start + chunk))
        records += _simulate(obj, params, provider, X0[idx], h, master_seed, idx, keep_paths)
    result = EnsembleResult(records, summarize(records, obj, success_radius))
    if all(r.failed for r in records):
        raise EnsembleError("all trajectories failed", result)
    return result


def _fmean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def summarize(records, obj: ObjectiveSpec, success_radius: float = 0.3, bins: int = 50) -> dict:
    """Order-independent ensemble statistics over the non-failed records."""
    ok = sorted((r for r in records if not r.failed), key=lambda r: r.index)
    summary = {
        "n_traj": len(records),
        "n_failed": len(records) - len(ok),
        "error": len(ok) == 0,
        "success_radius": success_radius,
    }
    if not ok:
        summary.update(mean_f_terminal=None, quantiles_f_terminal=None, mean_best_f_seen=None,
                       success_fraction=None, terminal_histogram=None, n_clamped=0,
                       ess_min=None, ess_mean=None)
        return summary
    fT = np.array([r.f_terminal for r in ok])
    term = np.stack([r.terminal_state for r in ok])
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    summary["mean_f_terminal"] = _fmean(fT)
    summary["quantiles_f_terminal"] = {str(q): float(np.quantile(fT, q)) for q in qs}
    summary["mean_best_f_seen"] = _fmean(r.best_f_seen for r in ok)
    if obj.known_minimizer is not None:
        dist = np.linalg.norm(term - obj.known_minimizer, axis=1)
        summary["success_fraction"] = float(np.mean(dist <= success_radius))
    else:
        summary["success_fraction"] = None
    hist = []
    for k in range(obj.dim):
        counts, edges = np.histogram(term[:, k], bins=bins)
        hist.append({"counts": counts.tolist(), "edges": edges.tolist()})
    summary["terminal_histogram"] = hist
    summary["n_clamped"] = int(sum(r.n_clamped for r in records))
    ess = [r.min_ess for r in ok if np.isfinite(r.min_ess)]
    summary["ess_min"] = float(min(ess)) if ess else None
    summary["ess_mean"] = _fmean(r.mean_ess for r in ok if np.isfinite(r.mean_ess)) if ess else None
    return summary
