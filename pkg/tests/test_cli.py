import json
import os
import stat

import pytest

from steinlab.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NO_CONVERGENCE,
    EXIT_NON_FINITE,
    ExperimentConfig,
    main,
    scatter_svg_from_csv,
    validate,
)
from steinlab.errors import ConfigInvalid

MINIMAL = {"experiment": "run-ode"}


def write_config(tmp_path, raw, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def run_cli(tmp_path, command, raw, out="out", *extra):
    target = tmp_path / out
    code = main([command, "--config", write_config(tmp_path, raw), "--out", str(target), *extra])
    return code, target


class TestValidate:
    def test_minimal_config_is_valid(self):
        assert validate(MINIMAL) == []

    @pytest.mark.parametrize("dt", [0.0, -0.1])
    def test_non_positive_dt(self, dt):
        problems = validate({"experiment": "run-ode", "dynamics": {"dt": dt}})
        assert len(problems) == 1
        assert "dynamics.dt" in problems[0]

    def test_rough_kernel_with_v_statistic(self):
        raw = {
            "experiment": "ksd",
            "kernel": {"family": "exp-power", "sigma": 1.0, "p": 1.0},
            "diagnostics": {"ksd_estimator": "v-stat"},
        }
        (problem,) = validate(raw)
        assert "only continuously differentiable off the diagonal" in problem
        raw["diagnostics"]["ksd_estimator"] = "u-stat"
        assert validate(raw) == []

    @pytest.mark.parametrize(
        "raw,needle",
        [
            ({"experiment": "run-ode", "colour": "red"}, "unknown field 'colour'"),
            ({"experiment": "run-ode", "dynamics": {"dtt": 0.1}}, "unknown field 'dtt'"),
            ({"experiment": "warp"}, "experiment must be one of"),
            ({"experiment": "run-tilted"}, "needs a tilt field"),
            ({"experiment": "compare", "kernel": [{"family": "gaussian", "sigma": 1.0}]}, "exactly two kernels"),
            ({"experiment": "continuum-identities", "target": {"family": "gaussian", "mean": [0.0, 0.0]}}, "one-dimensional"),
            ({"experiment": "run-ode", "ensemble": {"n": 5, "init": "grid"}, "target": {"family": "gaussian", "mean": [0, 0]}}, "perfect 2-th power"),
            ({"experiment": "run-ode", "diagnostics": {"hamiltonian": True}}, "needs a tilt field"),
        ],
    )
    def test_diagnostics(self, raw, needle):
        assert any(needle in p for p in validate(raw))

    def test_from_dict_raises_with_every_problem(self):
        with pytest.raises(ConfigInvalid) as info:
            ExperimentConfig.from_dict({"experiment": "run-ode", "dynamics": {"dt": 0, "steps": -1}})
        assert len(info.value.diagnostics) == 2

    def test_round_trip(self):
        raw = {
            "experiment": "run-tilted",
            "kernel": {"family": "imq", "sigma": 0.7},
            "tilt": {"representation": "linear", "coefficients": [1.0]},
            "dynamics": {"dt": 0.02, "steps": 5, "seed": 9},
        }
        config = ExperimentConfig.from_dict(raw)
        assert ExperimentConfig.from_dict(config.to_dict()) == config
        assert ExperimentConfig.from_json(config.to_json()).sha256 == config.sha256

    def test_validate_command(self, tmp_path, capsys):
        assert main(["validate", "--config", write_config(tmp_path, MINIMAL)]) == 0
        assert json.loads(capsys.readouterr().out) == {"valid": True, "diagnostics": []}
        bad = write_config(tmp_path, {"experiment": "run-ode", "dynamics": {"dt": -1}}, "bad.json")
        assert main(["validate", "--config", bad]) == EXIT_CONFIG


class TestRuns:
    def test_zero_steps_writes_initial_state(self, tmp_path):
        code, out = run_cli(tmp_path, "run-ode", {"dynamics": {"steps": 0}, "ensemble": {"n": 4}})
        assert code == 0
        rows = (out / "trajectory.csv").read_text().splitlines()
        assert rows[0] == "step,t,particle,x0"
        assert len(rows) == 5 and all(r.startswith("0,0,") for r in rows[1:])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert {a["name"] for a in manifest["artefacts"]} >= {"trajectory.csv", "summary.json"}

    def test_reruns_are_byte_identical(self, tmp_path):
        raw = {"dynamics": {"steps": 20, "dt": 0.02, "seed": 4}, "ensemble": {"n": 3}, "output": {"formats": ["csv", "json", "svg"]}}
        _, a = run_cli(tmp_path, "run-sde", raw, "a")
        _, b = run_cli(tmp_path, "run-sde", raw, "a2")
        for name in ("trajectory.csv", "summary.json", "scatter.svg"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        _, c = run_cli(tmp_path, "run-sde", raw, "c", "--seed", "5")
        assert (a / "trajectory.csv").read_bytes() != (c / "trajectory.csv").read_bytes()

    def test_manifest_is_accepted_as_config(self, tmp_path):
        _, a = run_cli(tmp_path, "run-ode", {"dynamics": {"steps": 3}})
        code = main(["run-ode", "--config", str(a / "manifest.json"), "--out", str(tmp_path / "again")])
        assert code == 0
        assert (a / "trajectory.csv").read_bytes() == (tmp_path / "again" / "trajectory.csv").read_bytes()

    def test_command_must_match_config(self, tmp_path):
        code, out = run_cli(tmp_path, "run-sde", {"experiment": "run-ode"})
        assert code == EXIT_CONFIG
        assert json.loads((out / "error.json").read_text())["exit_code"] == EXIT_CONFIG

    def test_svg_replots_from_csv(self, tmp_path):
        code, out = run_cli(tmp_path, "run-ode", {"dynamics": {"steps": 4}, "output": {"formats": ["csv", "svg"]}})
        assert code == 0
        replot = scatter_svg_from_csv((out / "trajectory.csv").read_text(), "run-ode t=0.04")
        assert replot == (out / "scatter.svg").read_text()

    def test_ksd_and_rate_summaries(self, tmp_path):
        _, out = run_cli(
            tmp_path, "ksd", {"target": {"family": "gaussian", "mean": [0, 0]}, "ensemble": {"n": 1, "init": "explicit", "positions": [[0, 0]]}}
        )
        ksd = json.loads((out / "ksd.json").read_text())["ksd"]
        assert ksd["value"] == pytest.approx(4.0, abs=1e-12)
        # an Euler path is driven exactly by the SVGD drift, an RK4 path only up to O(dt^2)
        _, out = run_cli(tmp_path, "rate", {"dynamics": {"steps": 10, "mode": "ode-euler"}}, "euler")
        assert json.loads((out / "rate.json").read_text())["rate_functional"] == pytest.approx(0.0, abs=1e-20)
        _, out = run_cli(tmp_path, "rate", {"dynamics": {"steps": 10}}, "rk4")
        assert 0 < json.loads((out / "rate.json").read_text())["rate_functional"] < 1e-6

    def test_thread_variable(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STEINLAB_THREADS", "1")
        assert run_cli(tmp_path, "run-ode", MINIMAL)[0] == 0
        monkeypatch.setenv("STEINLAB_THREADS", "zero")
        assert run_cli(tmp_path, "run-ode", MINIMAL, "bad")[0] == EXIT_CONFIG


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        code, _ = run_cli(tmp_path, "run-ode", {"dynamics": {"dt": 0}})
        assert code == EXIT_CONFIG
        err = json.loads(capsys.readouterr().err)
        assert err["diagnostics"] and "dynamics.dt" in err["diagnostics"][0]

    def test_no_convergence(self, tmp_path):
        raw = {"ensemble": {"n": 4}, "options": {"max_steps": 0, "tol": 1e-300}}
        code, out = run_cli(tmp_path, "reproduce-fig1", raw)
        assert code == EXIT_NO_CONVERGENCE
        assert (out / "error.json").exists()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite(self, tmp_path):
        raw = {
            "target": {"family": "double-well", "a": 1.0, "b": 1.0},
            "ensemble": {"n": 2, "init": "explicit", "positions": [[3.0], [-2.0]]},
            "dynamics": {"dt": 1e200, "steps": 3},
        }
        assert run_cli(tmp_path, "run-ode", raw)[0] == EXIT_NON_FINITE

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable_directory(self, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir()
        locked.chmod(stat.S_IRUSR | stat.S_IXUSR)
        assert run_cli(tmp_path, "run-ode", MINIMAL, "locked/out")[0] == EXIT_IO

    def test_output_path_is_a_file(self, tmp_path):
        (tmp_path / "file").write_text("x")
        assert run_cli(tmp_path, "run-ode", MINIMAL, "file/out")[0] == EXIT_IO

    def test_missing_config_file(self, tmp_path):
        assert main(["run-ode", "--config", str(tmp_path / "nope.json")]) == EXIT_IO
