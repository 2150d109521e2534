import json

import numpy as np
import pytest

from coxsub.cli import main

from oracles import naive_nelson_aalen


def run_cli(args):
    return main(args)


@pytest.fixture(scope="module")
def sim_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.csv"
    code = run_cli(
        ["simulate", "--case", "I", "--n", "2000", "--cr", "0.2", "--seed", "7", "-o", str(path)]
    )
    assert code == 0
    return path


class TestSimulate:
    def test_writes_rows_and_sidecar(self, sim_file):
        lines = sim_file.read_text().splitlines()
        assert lines[0] == "time,status,x1,x2,x3,x4,x5"
        assert len(lines) == 2001
        meta = json.loads((sim_file.parent / (sim_file.name + ".meta.json")).read_text())
        assert meta["schema"] == 1
        assert meta["c0"] > 0
        assert meta["seed"] == 7
        assert meta["beta_true"] == [-1.0, -0.5, 0.0, 0.5, 1.0]

    def test_repeat_is_byte_identical(self, sim_file, tmp_path):
        other = tmp_path / "again.csv"
        run_cli(
            ["simulate", "--case", "I", "--n", "2000", "--cr", "0.2", "--seed", "7", "-o", str(other)]
        )
        assert other.read_bytes() == sim_file.read_bytes()

    def test_bad_cr_exits_2(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli(["simulate", "--cr", "1.5", "-o", str(tmp_path / "x.csv")])
        assert exc.value.code == 2
        assert "--cr" in capsys.readouterr().err


class TestFit:
    def test_fit_recovers_truth(self, sim_file, tmp_path, capsys):
        out = tmp_path / "fit.json"
        code = run_cli(["fit", "-i", str(sim_file), "-o", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert report["schema"] == 1 and report["converged"]
        est = np.asarray(report["beta"])
        se = np.asarray(report["se"])
        truth = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
        assert np.all(np.abs(est - truth) < 5 * se)

    def test_fix_beta_zero_baseline_equals_nelson_aalen(self, sim_file, tmp_path):
        base = tmp_path / "base.csv"
        code = run_cli(
            ["fit", "-i", str(sim_file), "--fix-beta", "0", "--baseline-out", str(base), "-o",
             str(tmp_path / "r.json")]
        )
        assert code == 0
        rows = [line.split(",") for line in base.read_text().splitlines()[1:]]
        got_t = np.array([float(r[0]) for r in rows])
        got_v = np.array([float(r[1]) for r in rows])
        from coxsub import load_csv

        ds = load_csv(sim_file)
        na_t, na_j = naive_nelson_aalen(ds.time, ds.status)
        assert np.array_equal(got_t, na_t)
        np.testing.assert_allclose(got_v, np.cumsum(na_j), atol=1e-12)

    def test_empty_covariates_exits_2(self, sim_file):
        with pytest.raises(SystemExit) as exc:
            run_cli(["fit", "-i", str(sim_file), "--covariates", ""])
        assert exc.value.code == 2

    def test_csv_format(self, sim_file, tmp_path):
        out = tmp_path / "fit.csv"
        code = run_cli(["fit", "-i", str(sim_file), "-o", str(out), "--format", "csv"])
        assert code == 0
        header, row = out.read_text().splitlines()
        assert "beta.0" in header and "se.4" in header


class TestSubsample:
    def test_report_fields_and_ci(self, sim_file, tmp_path):
        out = tmp_path / "sub.json"
        code = run_cli(
            ["subsample", "-i", str(sim_file), "--r0", "150", "--r", "400", "--seed", "5",
             "-o", str(out)]
        )
        assert code == 0
        rep = json.loads(out.read_text())
        est = np.asarray(rep["est"])
        se = np.asarray(rep["se"])
        np.testing.assert_allclose(rep["ci_lower"], est - 1.96 * se, rtol=1e-12)
        np.testing.assert_allclose(rep["ci_upper"], est + 1.96 * se, rtol=1e-12)
        assert set(rep["timings"]) == {
            "pilot_fit", "probability_pass", "draw", "second_fit", "covariance",
        }

    def test_ci_matches_published_example(self):
        # Est -1.0009, SE 0.1303 -> (-1.2563, -0.7455)
        est, se = -1.0009, 0.1303
        assert est - 1.96 * se == pytest.approx(-1.2563, abs=1.5e-4)
        assert est + 1.96 * se == pytest.approx(-0.7455, abs=1.5e-4)

    def test_delta_one_matches_unif_criterion(self, sim_file, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        run_cli(["subsample", "-i", str(sim_file), "--delta", "1.0", "--criterion", "lopt",
                 "--r0", "100", "--r", "200", "--seed", "9", "-o", str(a)])
        run_cli(["subsample", "-i", str(sim_file), "--criterion", "unif",
                 "--r0", "100", "--r", "200", "--seed", "9", "-o", str(b)])
        ra, rb = json.loads(a.read_text()), json.loads(b.read_text())
        assert ra["est"] == rb["est"]
        assert ra["se"] == rb["se"]

    def test_reps_adds_spread_stats(self, sim_file, tmp_path):
        out = tmp_path / "reps.json"
        code = run_cli(["subsample", "-i", str(sim_file), "--r0", "100", "--r", "200",
                        "--reps", "5", "--seed", "3", "-o", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["reps"] == 5
        assert len(rep["bias"]) == 5 and len(rep["ese"]) == 5
        assert "mse" in rep

    def test_r_zero_exits_2(self, sim_file):
        with pytest.raises(SystemExit) as exc:
            run_cli(["subsample", "-i", str(sim_file), "--r", "0"])
        assert exc.value.code == 2

    def test_plan_export_and_five_number_block(self, sim_file, tmp_path):
        out = tmp_path / "sub.json"
        plan_path = tmp_path / "plan.csv"
        code = run_cli(["subsample", "-i", str(sim_file), "--r0", "100", "--r", "200",
                        "--seed", "6", "--plan-out", str(plan_path), "-o", str(out)])
        assert code == 0
        lines = plan_path.read_text().splitlines()
        assert lines[0] == "index,prob,status"
        assert len(lines) == 2001
        probs = np.array([float(line.split(",")[1]) for line in lines[1:]])
        assert abs(probs.sum() - 1.0) < 1e-9
        rep = json.loads(out.read_text())
        five = rep["plan_five_number"]
        assert len(five["censored"]) == 5 and len(five["uncensored"]) == 5
        assert five["uncensored"][2] > five["censored"][2]


class TestCalibrate:
    def test_deterministic_and_near_target(self, capsys):
        code = run_cli(["calibrate", "--case", "I", "--cr", "0.2", "--seed", "1"])
        assert code == 0
        first = json.loads(capsys.readouterr().out)
        code = run_cli(["calibrate", "--case", "I", "--cr", "0.2", "--seed", "1"])
        assert code == 0
        second = json.loads(capsys.readouterr().out)
        assert first["c0"] == second["c0"]
        assert abs(first["achieved_cr"] - 0.2) < 0.01

    def test_cr_zero_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli(["calibrate", "--cr", "0"])
        assert exc.value.code == 2


class TestBenchmark:
    def test_small_grid_writes_tables(self, tmp_path, capsys):
        out_dir = tmp_path / "bench"
        code = run_cli([
            "benchmark", "--cases", "I", "--n", "3000", "--cr", "0.2", "--r0", "100",
            "--r-grid", "200,300", "--delta-grid", "0.1", "--methods", "lopt,unif",
            "--reps", "10", "--timing-n", "20000", "--seed", "2", "--out-dir", str(out_dir),
        ])
        assert code == 0
        table = (out_dir / "replications.csv").read_text().splitlines()
        assert len(table) == 5  # header + 2 methods x 2 r values
        assert table[0].startswith("case,cr,method")
        timing = (out_dir / "timing.csv").read_text().splitlines()
        assert timing[0].startswith("n,full_fit_s,two_step_s,speedup")
        assert len(timing) == 2


    def test_partial_failure_recorded_and_run_continues(self, tmp_path):
        # r=1 can never produce a usable fit, so that cell fails while the
        # r=200 cell still completes
        out_dir = tmp_path / "bench"
        code = run_cli([
            "benchmark", "--cases", "I", "--n", "3000", "--cr", "0.2", "--r0", "100",
            "--r-grid", "1,200", "--delta-grid", "0.1", "--methods", "lopt",
            "--reps", "4", "--timing-n", "20000", "--seed", "2", "--out-dir", str(out_dir),
        ])
        assert code == 0
        lines = (out_dir / "replications.csv").read_text().splitlines()
        header = lines[0].split(",")
        rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
        failed = [r for r in rows if r["r"] == "1"][0]
        good = [r for r in rows if r["r"] == "200"][0]
        assert failed["error"] != "" and failed["mse"] == ""
        assert good["error"] == "" and float(good["mse"]) > 0

    def test_threads_reproduce_serial_tables(self, tmp_path):
        args = ["benchmark", "--cases", "I", "--n", "3000", "--cr", "0.2", "--r0", "100",
                "--r-grid", "200", "--delta-grid", "0.1", "--methods", "lopt",
                "--reps", "8", "--timing-n", "20000", "--seed", "3"]
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        assert run_cli(args + ["--threads", "1", "--out-dir", str(a_dir)]) == 0
        assert run_cli(args + ["--threads", "2", "--out-dir", str(b_dir)]) == 0
        assert (a_dir / "replications.csv").read_bytes() == (b_dir / "replications.csv").read_bytes()


class TestConfigFile:
    def test_config_supplies_defaults_flags_win(self, sim_file, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"r0": 123, "r": 200, "seed": 4}))
        out = tmp_path / "out.json"
        code = run_cli(["subsample", "-i", str(sim_file), "--config", str(cfg_path),
                        "--r0", "111", "-o", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["r0"] == 111  # flag beats config
        assert rep["r"] == 200  # config beats built-in default
        assert rep["seed"] == 4

    def test_unknown_config_key_exits_2(self, sim_file, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"bogus_key": 1}))
        with pytest.raises(SystemExit) as exc:
            run_cli(["subsample", "-i", str(sim_file), "--config", str(cfg_path)])
        assert exc.value.code == 2
        assert "bogus_key" in capsys.readouterr().err


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        run_cli(["fit", "--frobnicate"])
    assert exc.value.code == 2


def test_numerical_failure_exits_3(tmp_path, capsys):
    # perfectly collinear covariates make the curvature singular
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, 50)
    t = rng.exponential(1.0, 50)
    path = tmp_path / "collinear.csv"
    lines = ["time,status,x1,x2"]
    lines += [f"{float(t[i])!r},1,{float(x[i])!r},{float(2 * x[i])!r}" for i in range(50)]
    path.write_text("\n".join(lines) + "\n")
    code = run_cli(["fit", "-i", str(path)])
    assert code == 3
    assert "positive definite" in capsys.readouterr().err


def test_threads_env_var(monkeypatch):
    from coxsub.cli import _default_threads

    monkeypatch.setenv("COXSUB_THREADS", "4")
    assert _default_threads() == 4
    monkeypatch.setenv("COXSUB_THREADS", "junk")
    assert _default_threads() == 1


def test_console_script_help():
    import subprocess

    out = subprocess.run(["coxsub", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "simulate" in out.stdout and "benchmark" in out.stdout
