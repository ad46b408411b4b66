import numpy as np
import pytest

from gibbs_drift import integrator, oracle, sampler
from gibbs_drift.gibbs_core import ControlParams
from gibbs_drift.integrator import DriftProvider, em_ensemble, em_run
from gibbs_drift.objectives import BUILTIN_NAMES, ObjectiveSpec, builtin_objective


def test_zero_drift_without_noise():
    obj = builtin_objective("iso_quadratic", 2)
    p = ControlParams(1.0, 1e-12, 0.5)
    rec = em_run(obj, p, DriftProvider("zero"), [0.4, -1.0], 1e-3, 0)
    np.testing.assert_allclose(rec.states, np.tile([0.4, -1.0], (rec.states.shape[0], 1)), atol=1e-5)


def test_affine_limit_contracts_linearly():
    obj = builtin_objective("iso_quadratic", 1)
    p = ControlParams(1.0, 1e-12, 0.5, 0.01)
    rec = em_run(obj, p, DriftProvider("affine_limit"), [1.0], 1e-4, 0)
    assert rec.times[-1] == pytest.approx(0.99, abs=1e-4)
    assert rec.terminal_state[0] == pytest.approx(0.01, abs=1e-3)


def test_langevin_baseline_is_terminal_field(dw2, base_params):
    X = np.array([[0.3, -0.7], [1.2, 0.1]])
    U, _ = DriftProvider("langevin_baseline").evaluate(dw2, base_params, 0.2, X)
    np.testing.assert_allclose(U, -(1.0 / 0.5) * dw2.gradient(X))


def test_affine_limit_needs_target():
    obj = ObjectiveSpec("flat", 1, value=lambda y: np.zeros(y.shape[:-1]),
                        gradient=np.zeros_like, hessian=lambda y: np.zeros(y.shape + (1,)))
    with pytest.raises(ValueError):
        DriftProvider("affine_limit").resolve_target(obj)
    np.testing.assert_allclose(DriftProvider("affine_limit", target=[2.0]).resolve_target(obj), [2.0])


@pytest.mark.parametrize("kind", ["oracle", "monte_carlo"])
def test_em_run_is_deterministic(dw1, base_params, kind):
    prov = DriftProvider(kind, n_samples=200)
    a = em_run(dw1, base_params, prov, [0.8], 2e-3, master_seed=5, trajectory_index=3)
    b = em_run(dw1, base_params, prov, [0.8], 2e-3, master_seed=5, trajectory_index=3)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.drifts, b.drifts)
    c = em_run(dw1, base_params, prov, [0.8], 2e-3, master_seed=5, trajectory_index=4)
    assert not np.array_equal(a.states, c.states)


def test_record_invariants(dw2, base_params):
    rec = em_run(dw2, base_params, DriftProvider("oracle"), [1.0, 1.0], 2e-3, 1)
    assert np.all(np.diff(rec.times) > 0)
    assert rec.times[0] == 0.0
    T, delta = base_params.horizon_T, base_params.terminal_offset_delta
    assert T - delta - 2e-3 < rec.times[-1] <= T - delta + 1e-12
    assert rec.states.shape == (rec.times.size, 2)
    assert rec.drifts.shape == (rec.times.size - 1, 2)
    assert rec.best_f_seen <= rec.f_terminal
    assert rec.best_f_seen == pytest.approx(dw2.value(rec.states).min())
    assert rec.n_clamped == 0
    np.testing.assert_array_equal(rec.terminal_state, rec.states[-1])


@pytest.mark.parametrize("h", [0.0, -1e-3, 0.3, 5e-3])
def test_step_size_preconditions(base_params, h):
    with pytest.raises(ValueError):
        integrator.step_count(base_params, h)


def test_bad_inputs(iso1, base_params):
    with pytest.raises(ValueError):
        em_run(iso1, base_params, DriftProvider("zero"), [np.inf], 1e-3, 0)
    with pytest.raises(ValueError):
        DriftProvider("nope")
    with pytest.raises(ValueError):
        em_ensemble(iso1, base_params, DriftProvider("zero"), "sideways", 1e-3, 2, 0)


def test_empty_ensemble(iso1, base_params):
    res = em_ensemble(iso1, base_params, DriftProvider("zero"), "point", 1e-3, 0, 0, x0=[0.0])
    assert res.records == []
    assert res.summary["error"] is True


def test_single_trajectory_ensemble(iso1, base_params):
    res = em_ensemble(iso1, base_params, DriftProvider("oracle"), "point", 1e-3, 1, 0, x0=[1.0])
    assert len(res.records) == 1
    assert res.summary["n_traj"] == 1
    assert not res.summary["error"]


def test_ensemble_matches_single_runs(iso2, base_params):
    res = em_ensemble(iso2, base_params, DriftProvider("oracle"), "point", 2e-3, 4, 9,
                      x0=[1.0, 0.5], keep_paths=True)
    for r in res.records:
        single = em_run(iso2, base_params, DriftProvider("oracle"), [1.0, 0.5], 2e-3, 9, r.index)
        np.testing.assert_allclose(r.states, single.states, rtol=1e-12, atol=1e-14)


def test_point_cloud_and_summary(dw1, base_params):
    cloud = np.linspace(-1.5, 1.5, 8)[:, None]
    res = em_ensemble(dw1, base_params, DriftProvider("oracle"), "point_cloud", 2e-3, 8, 2, cloud=cloud)
    s = res.summary
    for key in ("mean_f_terminal", "quantiles_f_terminal", "mean_best_f_seen", "success_fraction",
                "terminal_histogram", "n_clamped"):
        assert key in s
    fT = np.array([r.f_terminal for r in res.records])
    assert s["mean_f_terminal"] == pytest.approx(fT.mean(), rel=1e-12)
    assert sum(s["terminal_histogram"][0]["counts"]) == 8
    np.testing.assert_array_equal([r.states[0, 0] for r in res.records], cloud[:, 0])
    with pytest.raises(ValueError):
        em_ensemble(dw1, base_params, DriftProvider("oracle"), "point_cloud", 2e-3, 3, 2, cloud=cloud)


def test_all_failed_raises(iso1, base_params):
    cloud = np.full((3, 1), np.nan)
    with pytest.raises(integrator.EnsembleError) as info:
        em_ensemble(iso1, base_params, DriftProvider("zero"), "point_cloud", 1e-3, 3, 0, cloud=cloud)
    assert info.value.result.summary["n_failed"] == 3


def test_provider_failure_carries_step(base_params):
    def value(y):
        return np.where(np.abs(y[..., 0]) > 1.0, np.nan, 0.5 * y[..., 0] ** 2)
    obj = ObjectiveSpec("holey", 1, value=value, gradient=lambda y: y,
                        hessian=lambda y: np.ones(y.shape + (1,)))
    with pytest.raises(integrator.DriftProviderError) as info:
        em_run(obj, base_params, DriftProvider("monte_carlo", n_samples=100), [0.0], 1e-3, 0)
    assert info.value.step == 0


def test_monte_carlo_records_ess_and_clamps(dw1):
    p = ControlParams(1.0, 0.5, 0.05)
    res = em_ensemble(dw1, p, DriftProvider("monte_carlo", n_samples=20), "point", 1e-3, 20, 0, x0=[1.0])
    s = res.summary
    assert s["ess_min"] is not None and 1.0 <= s["ess_min"] <= 80.0
    assert s["n_clamped"] >= 0
    off = em_ensemble(dw1, p, DriftProvider("monte_carlo", n_samples=20, clamp=False), "point",
                      1e-3, 20, 0, x0=[1.0])
    assert off.summary["n_clamped"] == 0


def test_h0_init_matches_gibbs_law(iso1, base_params):
    from scipy.stats import kstest
    n = 4000
    res = em_ensemble(iso1, base_params, DriftProvider("oracle"), "h0_sampler", 1e-3, n, 1)
    term = np.array([r.terminal_state[0] for r in res.records])
    stat = kstest(term, oracle.gibbs_cdf_1d(iso1, base_params)).statistic
    assert stat <= 1.63 / np.sqrt(n)


@pytest.mark.slow
def test_double_well_success_fraction(dw1):
    p = ControlParams(1.0, 0.5, 0.05)
    n, x0 = 1000, 0.96
    res = em_ensemble(dw1, p, DriftProvider("oracle"), "point", 1e-3, n, 0, x0=[x0])
    mass = oracle.transition_ball_mass(dw1, p, 0.0, [x0], p.horizon_T - p.terminal_offset_delta, 0.3)
    frac = res.summary["success_fraction"]
    assert frac >= mass - 3 * np.sqrt(mass * (1 - mass) / n)
    assert res.summary["n_clamped"] == 0


@pytest.mark.slow
def test_weak_order(iso1, base_params):
    n = 10_000
    means, ses = [], []
    for h in (2e-3, 1e-3, 5e-4):
        res = em_ensemble(iso1, base_params, DriftProvider("oracle"), "point", h, n, 3, x0=[1.0])
        term = np.array([r.terminal_state[0] for r in res.records])
        means.append(term.mean())
        ses.append(term.std(ddof=1) / np.sqrt(n))
    se = np.sqrt(ses[0] ** 2 + ses[1] ** 2)
    assert abs(means[0] - means[1]) <= abs(means[1] - means[2]) + 3 * se


@pytest.mark.slow
def test_mc_drift_agrees_with_oracle_along_paths(dw1, base_params):
    res = em_ensemble(dw1, base_params, DriftProvider("oracle"), "point", 2.5e-3, 10, 4,
                      x0=[0.9], keep_paths=True)
    steps = (0, 200, 390)
    for k in steps:
        t = res.records[0].times[k]
        X = np.stack([r.states[k] for r in res.records])
        U_or = np.stack([r.drifts[k] for r in res.records])
        draws = []
        for rep in range(30):
            est, _ = sampler.mc_barycenter_batch(dw1, base_params, t, X, 100_000,
                                                 [sampler.substream(77, rep, k, i) for i in range(10)])
            draws.append(-(X - est) / base_params.remaining(t))
        draws = np.stack(draws)
        se = draws.std(axis=0, ddof=1) / np.sqrt(30)
        assert np.all(np.abs(draws.mean(axis=0) - U_or) <= 3 * se + 1e-12), f"step {k}"


@pytest.mark.slow
@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_near_terminal_stiffness_guard(name):
    d = 2
    obj = builtin_objective(name, d)
    p = ControlParams(1.0, 0.5, 0.5, 0.01)
    kind = "oracle" if obj.quadratic_matrix is not None else "affine_limit"
    prov = DriftProvider(kind, target=np.ones(d) if name == "rosenbrock" else None)
    if name == "smoothed_ackley":
        prov = DriftProvider("affine_limit", target=np.zeros(d))
    res = em_ensemble(obj, p, prov, "point", p.terminal_offset_delta / 4, 2000, 6, x0=np.full(d, 1.5))
    assert res.summary["n_failed"] == 0
    assert all(np.all(np.isfinite(r.terminal_state)) for r in res.records)
