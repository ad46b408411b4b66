import csv
import json

import numpy as np
import pytest

from gibbs_drift import asymptotics, harness, oracle
from gibbs_drift.cli import EXIT_COMPUTE, EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main
from gibbs_drift.gibbs_core import ControlParams
from gibbs_drift.objectives import builtin_objective

PARAMS = {"T": 1.0, "beta": 0.5, "lambda": 0.5}


def write_config(tmp_path, mode, settings, name="iso_quadratic", dim=2, params=PARAMS, seed=0, **extra):
    cfg = {"objective": {"name": name, "dim": dim}, "params": dict(params), "mode": mode,
           "settings": settings, "master_seed": seed, **extra}
    path = tmp_path / f"{mode}.json"
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def run(mode, cfg, out, *extra):
    return main([mode, "--config", str(cfg), "--output-dir", str(out), *extra])


def test_drift_field_shape_contract(tmp_path):
    cfg = write_config(tmp_path, "drift-field", {"times": [0.1, 0.9], "resolution": 64})
    assert run("drift-field", cfg, tmp_path / "out") == EXIT_OK
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["artifacts"] == ["config.json", "field_t0.1.csv", "field_t0.9.csv"]
    assert manifest["status"] == "ok"
    assert {"versions", "master_seed", "oracle_tolerance", "created"} <= set(manifest)
    for t in ("0.1", "0.9"):
        header, data = read_csv(tmp_path / "out" / f"field_t{t}.csv")
        assert header == ["x1", "x2", "phi", "u1", "u2"]
        assert data.shape == (4096, 5)
    assert (tmp_path / "out" / "config.json").read_bytes() == cfg.read_bytes()


def test_drift_field_matches_closed_form(tmp_path):
    cfg = write_config(tmp_path, "drift-field", {"times": [0.0], "bounds": [[-1, 1], [-1, 1]],
                                                 "resolution": 3})
    assert run("drift-field", cfg, tmp_path / "out") == EXIT_OK
    _, data = read_csv(tmp_path / "out" / "field_t0.0.csv")
    row = data[np.all(np.isclose(data[:, :2], [1.0, 0.0]), axis=1)][0]
    ref = oracle.gaussian_closed_form(np.eye(2), ControlParams(1.0, 0.5, 0.5), 0.0, [1.0, 0.0])
    np.testing.assert_allclose(row[3:], ref.drift_u, atol=1e-6)
    assert row[2] == pytest.approx(ref.phi, abs=1e-6)


def test_drift_field_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, "drift-field", {"times": [0.3], "resolution": 16},
                       name="shifted_double_well")
    for out in ("a", "b"):
        assert run("drift-field", cfg, tmp_path / out) == EXIT_OK
    for name in ("config.json", "field_t0.3.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("mode,settings", [("drift-field", {}), ("sample-terminal", {"x": [0, 0, 0]})])
def test_plot_modes_reject_dim3(tmp_path, mode, settings, capsys):
    cfg = write_config(tmp_path, mode, settings, dim=3)
    assert run(mode, cfg, tmp_path / "out") == EXIT_CONFIG
    assert "dim <= 2" in capsys.readouterr().err


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(extra_key=1),
    lambda c: c.update(mode="dance"),
    lambda c: c["objective"].update(name="nope"),
    lambda c: c["params"].update(beta=-1.0),
    lambda c: c["settings"].update(h=0.5),
    lambda c: c["settings"].update(n_traj=0),
    lambda c: c["settings"].pop("x0"),
    lambda c: c.update(master_seed=-3),
])
def test_validation_errors(tmp_path, mutate):
    cfg = {"objective": {"name": "shifted_double_well", "dim": 1}, "params": dict(PARAMS),
           "mode": "optimize", "settings": {"x0": [1.0], "h": 1e-3, "n_traj": 2}}
    mutate(cfg)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["optimize", "--config", str(path), "--output-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_missing_file_and_mode_mismatch(tmp_path):
    assert main(["verify", "--config", str(tmp_path / "absent.json"), "--output-dir", str(tmp_path)]) == EXIT_CONFIG
    cfg = write_config(tmp_path, "verify", {})
    assert run("optimize", cfg, tmp_path / "o") == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("verify", bad, tmp_path / "o") == EXIT_CONFIG


def test_output_dir_required(tmp_path):
    cfg = write_config(tmp_path, "verify", {"checks": ["moreau_warmup"]})
    assert main(["verify", "--config", str(cfg)]) == EXIT_CONFIG
    cfg2 = write_config(tmp_path, "verify", {"checks": ["moreau_warmup"]}, output_dir=str(tmp_path / "via_cfg"))
    assert main(["verify", "--config", str(cfg2)]) == EXIT_OK
    assert (tmp_path / "via_cfg" / "reports.json").exists()


def test_verify_single_check(tmp_path):
    cfg = write_config(tmp_path, "verify", {"checks": ["chapman_kolmogorov"]})
    assert run("verify", cfg, tmp_path / "out") == EXIT_OK
    reports = json.loads((tmp_path / "out" / "reports.json").read_text())
    assert len(reports) == 1
    assert list(reports[0]) == ["check_name", "passed", "observed", "notes"]


def test_verify_unknown_check(tmp_path, capsys):
    cfg = write_config(tmp_path, "verify", {"checks": ["no_such_check"]})
    assert run("verify", cfg, tmp_path / "out") == EXIT_CONFIG
    assert "no_such_check" in capsys.readouterr().err


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    failing = lambda: asymptotics.CheckReport("moreau_warmup", False, [], "forced")  # noqa: E731
    monkeypatch.setitem(asymptotics.CHECKS, "moreau_warmup", failing)
    cfg = write_config(tmp_path, "verify", {"checks": ["moreau_warmup"]})
    assert run("verify", cfg, tmp_path / "out") == EXIT_VERIFY
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["failed_checks"] == ["moreau_warmup"]
    assert (tmp_path / "out" / "reports.json").exists()


def test_computation_failure_persists_manifest(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise FloatingPointError("boom")
    monkeypatch.setattr(harness.integrator, "em_ensemble", broken)
    cfg = write_config(tmp_path, "optimize", {"x0": [1.0], "h": 1e-3, "n_traj": 2}, dim=1)
    assert run("optimize", cfg, tmp_path / "out") == EXIT_COMPUTE
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "boom" in manifest["error"]


def test_sample_terminal_outputs(tmp_path):
    cfg = write_config(tmp_path, "sample-terminal",
                       {"x": [1.0], "times": [0.1, 0.5, 0.9], "bounds": [[-4, 4]], "resolution": 1601}, dim=1)
    assert run("sample-terminal", cfg, tmp_path / "out") == EXIT_OK
    p = ControlParams(1.0, 0.5, 0.5)
    obj = builtin_objective("iso_quadratic", 1)
    variances = []
    for t in ("0.1", "0.5", "0.9"):
        header, data = read_csv(tmp_path / "out" / f"eta_t{t}.csv")
        assert header == ["x1", "density", "a1", "u1"]
        y, dens = data[:, 0], data[:, 1]
        cell = y[1] - y[0]
        assert dens.sum() * cell == pytest.approx(1.0, abs=1e-4)
        mean = (dens * y).sum() * cell
        variances.append((dens * (y - mean) ** 2).sum() * cell)
        if t == "0.1":
            a = oracle.evaluate_point(obj, p, 0.1, [1.0]).barycenter_a[0]
            np.testing.assert_allclose(data[:, 2], a, atol=1e-6)
    assert variances[0] > variances[1] > variances[2]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert [e["t"] for e in summary["times"]] == [0.1, 0.5, 0.9]


def test_sample_terminal_2d(tmp_path):
    cfg = write_config(tmp_path, "sample-terminal", {"x": [0.5, -0.5], "times": [0.5], "resolution": 41},
                       name="shifted_double_well")
    assert run("sample-terminal", cfg, tmp_path / "out") == EXIT_OK
    header, data = read_csv(tmp_path / "out" / "eta_t0.5.csv")
    assert header == ["x1", "x2", "density", "a1", "a2", "u1", "u2"]
    assert data.shape == (41 * 41, 7)


def test_optimize_trajectories_opt_in(tmp_path):
    settings = {"provider": "oracle", "h": 2e-3, "n_traj": 3, "x0": [1.0]}
    cfg = write_config(tmp_path, "optimize", settings, name="shifted_double_well", dim=1)
    assert run("optimize", cfg, tmp_path / "plain") == EXIT_OK
    assert not (tmp_path / "plain" / "trajectories.csv").exists()
    settings["write_trajectories"] = True
    cfg = write_config(tmp_path, "optimize", settings, name="shifted_double_well", dim=1)
    assert run("optimize", cfg, tmp_path / "traj") == EXIT_OK
    header, data = read_csv(tmp_path / "traj" / "trajectories.csv")
    assert header == ["trajectory", "step", "t", "x1", "u1"]
    assert sorted(set(data[:, 0].astype(int))) == [0, 1, 2]
    s1 = (tmp_path / "plain" / "summary.json").read_bytes()
    s2 = (tmp_path / "traj" / "summary.json").read_bytes()
    assert s1 == s2


def test_single_trajectory(tmp_path):
    cfg = write_config(tmp_path, "optimize", {"h": 1e-3, "n_traj": 1, "x0": [1.0]}, dim=1)
    assert run("optimize", cfg, tmp_path / "o") == EXIT_OK
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["n_traj"] == 1


def test_seed_override(tmp_path):
    settings = {"provider": "monte_carlo", "N": 50, "h": 2e-3, "n_traj": 4, "x0": [1.0]}
    cfg = write_config(tmp_path, "optimize", settings, name="shifted_double_well", dim=1)
    run("optimize", cfg, tmp_path / "s0")
    run("optimize", cfg, tmp_path / "s1", "--seed", "1")
    m = json.loads((tmp_path / "s1" / "manifest.json").read_text())
    assert m["master_seed"] == 1
    assert (tmp_path / "s0" / "summary.json").read_bytes() != (tmp_path / "s1" / "summary.json").read_bytes()


def test_threads_flag_and_env(tmp_path, monkeypatch):
    monkeypatch.setenv("GIBBS_DRIFT_THREADS", "1")
    assert harness.configure_threads(None) == 1
    assert harness.configure_threads(2) == 2
    cfg = write_config(tmp_path, "verify", {"checks": ["moreau_warmup"]})
    assert run("verify", cfg, tmp_path / "o", "--threads", "0") == EXIT_OK
    assert run("verify", cfg, tmp_path / "o2", "--threads", "-1") == EXIT_CONFIG


@pytest.mark.slow
def test_optimize_double_well_monte_carlo(tmp_path):
    params = {"T": 1.0, "beta": 0.5, "lambda": 0.05}
    x0 = [0.96, 0.96]
    base = {"N": 2000, "h": 1e-3, "n_traj": 200, "x0": x0}
    cfg = write_config(tmp_path, "optimize", {"provider": "monte_carlo", **base},
                       name="shifted_double_well", params=params)
    assert run("optimize", cfg, tmp_path / "mc") == EXIT_OK
    summary = json.loads((tmp_path / "mc" / "summary.json").read_text())
    p = ControlParams(1.0, 0.5, 0.05)
    obj = builtin_objective("shifted_double_well", 2)
    mass = oracle.transition_ball_mass(obj, p, 0.0, x0, p.horizon_T - p.terminal_offset_delta, 0.3)
    n = summary["n_traj"]
    assert summary["success_fraction"] >= mass - 3 * np.sqrt(mass * (1 - mass) / n)
    assert summary["ess_min"] is not None
    cfg = write_config(tmp_path, "optimize", {"provider": "langevin_baseline", **base},
                       name="shifted_double_well", params=params)
    assert run("optimize", cfg, tmp_path / "lv") == EXIT_OK
    lv = json.loads((tmp_path / "lv" / "summary.json").read_text())
    assert set(lv) == set(summary)
