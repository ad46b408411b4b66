"""Run configuration, orchestration and persistence for the command line.

A run directory always holds ``config.json`` (the input bytes, verbatim),
``manifest.json`` (artifact list, versions, seed, status) and the mode's
outputs.  Reruns with the same configuration reproduce every file byte for
byte except the ``created`` timestamp in the manifest.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__, asymptotics, integrator, oracle
from .gibbs_core import ControlParams
from .objectives import BUILTIN_NAMES, builtin_objective

__all__ = [
    "MODES",
    "ConfigError",
    "VerificationFailed",
    "RunConfig",
    "load_config",
    "parse_config",
    "execute",
    "cmd_drift_field",
    "cmd_optimize",
    "cmd_verify",
    "cmd_sample_terminal",
]

MODES = ("drift-field", "optimize", "verify", "sample-terminal")
_TOP_KEYS = {"objective", "params", "mode", "settings", "master_seed", "output_dir"}
_PARAM_KEYS = {"T", "beta", "lambda", "delta"}
_SETTINGS_KEYS = {
    "drift-field": {"bounds", "resolution", "times", "tol"},
    "optimize": {"provider", "N", "h", "n_traj", "init", "x0", "cloud", "success_radius",
                 "write_trajectories", "clamp", "tol"},
    "verify": {"checks"},
    "sample-terminal": {"x", "times", "bounds", "resolution", "tol"},
}


class ConfigError(ValueError):
    """The run configuration violates a precondition."""


class VerificationFailed(RuntimeError):
    """At least one verification check failed."""


@dataclass
class RunConfig:
    objective: dict
    params: dict
    mode: str
    settings: dict = field(default_factory=dict)
    master_seed: int = 0
    output_dir: Optional[str] = None
    raw: Optional[bytes] = field(default=None, repr=False)

    def control_params(self) -> ControlParams:
        p = self.params
        return ControlParams(float(p.get("T", 1.0)), float(p.get("beta", 0.5)),
                             float(p.get("lambda", 0.5)),
                             None if p.get("delta") is None else float(p["delta"]))

    def objective_spec(self):
        return builtin_objective(self.objective["name"], self.objective["dim"])

    def resolved(self) -> dict:
        return {
            "objective": self.objective,
            "params": self.params,
            "mode": self.mode,
            "settings": self.settings,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
        }


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def parse_config(data: dict, raw: Optional[bytes] = None) -> RunConfig:
    """Validate a configuration mapping against the module preconditions."""
    _require(isinstance(data, dict), "configuration must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    _require(not unknown, f"unknown configuration keys {sorted(unknown)}")
    mode = data.get("mode")
    _require(mode in MODES, f"mode must be one of {MODES}, got {mode!r}")
    obj = data.get("objective")
    _require(isinstance(obj, dict) and set(obj) <= {"name", "dim"} and "name" in obj,
             "objective must be an object with fields name and dim")
    obj = {"name": obj["name"], "dim": obj.get("dim", 1)}
    _require(obj["name"] in BUILTIN_NAMES, f"objective name must be one of {BUILTIN_NAMES}")
    _require(isinstance(obj["dim"], int) and not isinstance(obj["dim"], bool) and obj["dim"] >= 1,
             "objective dim must be a positive integer")
    params = data.get("params", {})
    _require(isinstance(params, dict), "params must be an object")
    unknown = set(params) - _PARAM_KEYS
    _require(not unknown, f"unknown params keys {sorted(unknown)}")
    settings = data.get("settings", {})
    _require(isinstance(settings, dict), "settings must be an object")
    unknown = set(settings) - _SETTINGS_KEYS[mode]
    _require(not unknown, f"unknown settings for mode {mode}: {sorted(unknown)}")
    seed = data.get("master_seed", 0)
    _require(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0,
             "master_seed must be a non-negative integer")
    cfg = RunConfig(obj, params, mode, settings, seed, data.get("output_dir"), raw)
    try:
        obj = cfg.objective_spec()
        params_obj = cfg.control_params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _validate_mode(cfg, obj, params_obj)
    return cfg


def load_config(path) -> RunConfig:
    raw = Path(path).read_bytes()
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(data, raw)


def _times(settings, default, T):
    times = [float(t) for t in settings.get("times", default)]
    _require(times and all(0.0 <= t < T for t in times), f"times must lie in [0, T={T})")
    return times


def _validate_mode(cfg: RunConfig, obj, params: ControlParams):
    s = cfg.settings
    T = params.horizon_T
    if cfg.mode in ("drift-field", "sample-terminal"):
        _require(obj.dim <= 2, f"{cfg.mode} is limited to dim <= 2")
        _times(s, [0.1, 0.9], T)
        _bounds(s, obj.dim)
        _resolution(s, obj.dim)
        if cfg.mode == "sample-terminal":
            _require("x" in s and len(np.atleast_1d(s["x"])) == obj.dim,
                     "sample-terminal needs settings.x with one entry per dimension")
    elif cfg.mode == "optimize":
        kind = s.get("provider", "oracle")
        _require(kind in integrator.PROVIDER_KINDS, f"provider must be one of {integrator.PROVIDER_KINDS}")
        if kind == "oracle":
            _require(obj.dim <= oracle.MAX_DIM or obj.quadratic_matrix is not None,
                     f"oracle drift needs dim <= {oracle.MAX_DIM}")
        n_traj = s.get("n_traj", 100)
        _require(isinstance(n_traj, int) and n_traj >= 1, "n_traj must be a positive integer")
        N = s.get("N", 1000)
        _require(isinstance(N, int) and N >= 1, "N must be a positive integer")
        try:
            integrator.step_count(params, float(s.get("h", 1e-3)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        init = s.get("init", "point")
        _require(init in integrator.INIT_MODES, f"init must be one of {integrator.INIT_MODES}")
        if init == "point":
            _require("x0" in s and len(np.atleast_1d(s["x0"])) == obj.dim,
                     "init=point needs settings.x0 with one entry per dimension")
        if init == "h0_sampler":
            _require(obj.dim <= 2, "init=h0_sampler is limited to dim <= 2")
        if init == "point_cloud":
            cloud = np.asarray(s.get("cloud", []), dtype=float).reshape(-1, obj.dim)
            _require(cloud.shape[0] == n_traj, "point_cloud needs n_traj rows")
    elif cfg.mode == "verify":
        checks = s.get("checks") or []
        unknown = [c for c in checks if c not in asymptotics.CHECKS]
        _require(not unknown, f"unknown check(s) {unknown}")


def _bounds(settings, d):
    b = settings.get("bounds", [[-2.0, 2.0]] * d)
    b = np.asarray(b, dtype=float)
    if b.shape == (2,):
        b = np.tile(b, (d, 1))
    _require(b.shape == (d, 2) and np.all(b[:, 0] < b[:, 1]),
             "bounds must be [lo, hi] or one [lo, hi] pair per dimension")
    return b


def _resolution(settings, d):
    r = settings.get("resolution", 201 if d == 1 else 64)
    r = [r] * d if isinstance(r, int) else list(r)
    _require(len(r) == d and all(isinstance(n, int) and n >= 2 for n in r),
             "resolution must be an integer >= 2 or one per dimension")
    return r


# ---------------------------------------------------------------------------
# persistence


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(asymptotics.to_jsonable(obj), indent=2, allow_nan=True) + "\n",
                    encoding="utf-8", newline="")


def _time_tag(t: float) -> str:
    return repr(float(t))


def _grid_points(bounds, res):
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), axes


class _Run:
    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.dir = out_dir
        self.artifacts = []
        self.extra = {}

    def __enter__(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        if self.cfg.raw is not None:
            (self.dir / "config.json").write_bytes(self.cfg.raw)
        else:
            _write_json(self.dir / "config.json", self.cfg.resolved())
        return self

    def add(self, name: str):
        self.artifacts.append(name)
        return self.dir / name

    def __exit__(self, exc_type, exc, tb):
        manifest = {
            "mode": self.cfg.mode,
            "status": "ok" if exc is None else "failed",
            "error": None if exc is None else f"{type(exc).__name__}: {exc}",
            "master_seed": self.cfg.master_seed,
            "artifacts": ["config.json"] + self.artifacts,
            "resolved_config": self.cfg.resolved(),
            "versions": {"gibbs_drift": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()},
            **self.extra,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        _write_json(self.dir / "manifest.json", manifest)
        return False


# ---------------------------------------------------------------------------
# commands


def cmd_drift_field(cfg: RunConfig, out_dir: Path) -> Path:
    """Potential and drift on a grid at each configured time."""
    obj, params = cfg.objective_spec(), cfg.control_params()
    s = cfg.settings
    tol = float(s.get("tol", oracle.DEFAULT_TOL))
    pts, _ = _grid_points(_bounds(s, obj.dim), _resolution(s, obj.dim))
    with _Run(cfg, out_dir) as run:
        run.extra["oracle_tolerance"] = tol
        for t in _times(s, [0.1, 0.9], params.horizon_T):
            F = oracle.evaluate_batch(obj, params, t, pts, tol)
            header = [f"x{i + 1}" for i in range(obj.dim)] + ["phi"] + [f"u{i + 1}" for i in range(obj.dim)]
            rows = (list(x) + [p] + list(u) for x, p, u in zip(pts, F.phi, F.drift_u))
            _write_csv(run.add(f"field_t{_time_tag(t)}.csv"), header, rows)
    return out_dir


def cmd_sample_terminal(cfg: RunConfig, out_dir: Path) -> Path:
    """Conditional terminal density on a grid at each configured time."""
    obj, params = cfg.objective_spec(), cfg.control_params()
    s = cfg.settings
    tol = float(s.get("tol", oracle.DEFAULT_TOL))
    x = np.atleast_1d(np.asarray(s["x"], dtype=float))
    bounds = _bounds(s, obj.dim) if "bounds" in s else np.tile(x[:, None], (1, 2)) + np.array([-4.0, 4.0])
    pts, axes = _grid_points(bounds, _resolution(s, obj.dim))
    cell = float(np.prod([a[1] - a[0] for a in axes]))
    per_time = []
    with _Run(cfg, out_dir) as run:
        run.extra["oracle_tolerance"] = tol
        for t in _times(s, [0.1, 0.5, 0.9], params.horizon_T):
            e = oracle.evaluate_point(obj, params, t, x, tol)
            logd = oracle.eta_log_density(obj, params, t, x, pts, tol)
            dens = np.exp(logd)
            header = ([f"x{i + 1}" for i in range(obj.dim)] + ["density"]
                      + [f"a{i + 1}" for i in range(obj.dim)] + [f"u{i + 1}" for i in range(obj.dim)])
            rows = (list(y) + [p] + list(e.barycenter_a) + list(e.drift_u) for y, p in zip(pts, dens))
            _write_csv(run.add(f"eta_t{_time_tag(t)}.csv"), header, rows)
            per_time.append({"t": t, "barycenter": e.barycenter_a, "drift": e.drift_u,
                             "covariance": e.covariance, "grid_mass": float(dens.sum() * cell)})
        _write_json(run.add("summary.json"), {"x": x, "times": per_time})
    return out_dir


def cmd_optimize(cfg: RunConfig, out_dir: Path) -> Path:
    """Euler-Maruyama ensemble under the configured drift provider."""
    obj, params = cfg.objective_spec(), cfg.control_params()
    s = cfg.settings
    provider = integrator.DriftProvider(kind=s.get("provider", "oracle"), tol=float(s.get("tol", 1e-10)),
                                        n_samples=int(s.get("N", 1000)), clamp=s.get("clamp"))
    write_traj = bool(s.get("write_trajectories", False))
    with _Run(cfg, out_dir) as run:
        result = integrator.em_ensemble(
            obj, params, provider, s.get("init", "point"), float(s.get("h", 1e-3)),
            int(s.get("n_traj", 100)), cfg.master_seed, x0=s.get("x0"), cloud=s.get("cloud"),
            keep_paths=write_traj, success_radius=float(s.get("success_radius", 0.3)))
        summary = dict(result.summary)
        summary["provider"] = {"kind": provider.kind, "N": provider.n_samples if provider.kind == "monte_carlo" else None,
                               "clamp": provider.clamps}
        summary["failures"] = [{"index": r.index, "diagnostic": r.diagnostic} for r in result.records if r.failed]
        _write_json(run.add("summary.json"), summary)
        if write_traj:
            d = obj.dim
            header = (["trajectory", "step", "t"] + [f"x{i + 1}" for i in range(d)]
                      + [f"u{i + 1}" for i in range(d)])

            def rows():
                for r in result.records:
                    for k, t in enumerate(r.times):
                        u = r.drifts[k] if k < len(r.drifts) else [math.nan] * d
                        yield [r.index, k, float(t)] + list(r.states[k]) + list(u)
            _write_csv(run.add("trajectories.csv"), header, rows())
    return out_dir


def cmd_verify(cfg: RunConfig, out_dir: Path) -> Path:
    """Run the verification suite; raises :class:`VerificationFailed` after
    persisting the reports if any check failed."""
    with _Run(cfg, out_dir) as run:
        reports = asymptotics.run_full_suite({"checks": cfg.settings.get("checks"),
                                              "master_seed": cfg.master_seed})
        _write_json(run.add("reports.json"), [r.to_dict() for r in reports])
        failed = [r.check_name for r in reports if not r.passed]
        run.extra["failed_checks"] = failed
    if failed:
        raise VerificationFailed(f"failed checks: {failed}")
    return out_dir


_COMMANDS = {
    "drift-field": cmd_drift_field,
    "optimize": cmd_optimize,
    "verify": cmd_verify,
    "sample-terminal": cmd_sample_terminal,
}


def execute(cfg: RunConfig, out_dir=None) -> Path:
    """Dispatch ``cfg.mode`` into ``out_dir`` (default: ``cfg.output_dir``)."""
    target = out_dir if out_dir is not None else cfg.output_dir
    if target is None:
        raise ConfigError("no output directory given (config output_dir or --output-dir)")
    return _COMMANDS[cfg.mode](cfg, Path(target))


def configure_threads(threads: Optional[int]) -> Optional[int]:
    """Apply a thread count to the numeric backends; ``0`` or ``None`` means
    auto.  ``GIBBS_DRIFT_THREADS`` is used when no value is given."""
    if threads is None:
        env = os.environ.get("GIBBS_DRIFT_THREADS")
        threads = int(env) if env else 0
    if threads < 0:
        raise ConfigError("threads must be >= 0")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    return threads


def with_seed(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return cfg
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    cfg.master_seed = int(seed)
    return cfg
