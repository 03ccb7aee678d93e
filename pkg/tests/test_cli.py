import json
import os

import numpy as np
import pytest

from sweepopt import cli
from sweepopt.cli import UsageError, load_problem, main, parse_args
from sweepopt.dynamics import Trajectory


PROBLEM = {
    "set": {"kind": "orthant", "dim": 2},
    "x0": [1.0, 1.0],
    "T": 1.0,
    "f1": {"kind": "linear", "ctrl": [[-1.0, 0.0], [0.0, -1.0]]},
    "f2": {"kind": "linear", "state": [[1.0, -1.0], [-1.0, 1.0]]},
    "costs": {"terminal": {"Q": [[0.0, 0.0], [0.0, 1.0]]},
              "stage": {"a": {"Q": [[1.0, 0.0], [0.0, 1.0]]}}},
    "free_channels": ["a"],
    "label": "json-benchmark",
}


def _write_problem(tmp_path, payload=PROBLEM, name="problem.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def test_parse_simulate(tmp_path):
    spec = _write_problem(tmp_path)
    cfg = parse_args(["simulate", "--spec", spec, "--k", "100",
                      "--out", str(tmp_path)])
    assert cfg.subcommand == "simulate"
    assert cfg.k == 100
    assert cfg.tol == 1e-8
    assert cfg.seed == 0


def test_parse_benchmark_case(tmp_path):
    cfg = parse_args(["benchmark", "--case", "i", "--out", str(tmp_path)])
    assert cfg.subcommand == "benchmark"
    assert cfg.extras["case"] == "i"


def test_parse_optimize_without_spec_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        parse_args(["optimize"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_parse_validation_errors(tmp_path, capsys):
    spec = _write_problem(tmp_path)
    for argv in (
        ["simulate", "--spec", spec, "--k", "0"],
        ["simulate", "--spec", spec, "--k", "10", "--epsilon", "-1"],
        ["simulate", "--spec", spec, "--k", "10", "--tol", "0"],
        ["simulate", "--spec", spec, "--k", "10", "--seed", "-1"],
        ["simulate", "--spec", str(tmp_path / "missing.json"), "--k", "10"],
        ["frobnicate"],
    ):
        with pytest.raises(SystemExit) as exc:
            parse_args(argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_load_problem_round_trip(tmp_path):
    spec = load_problem(_write_problem(tmp_path))
    assert spec.n == 2 and spec.m == 2 and spec.d == 0
    assert spec.free_channels == frozenset({"a"})
    assert spec.label == "json-benchmark"
    a = np.array([2.0, 3.0])
    x = np.array([1.0, 4.0])
    assert np.allclose(spec.f1.value(a, x), [-2.0, -3.0])
    assert np.allclose(spec.f2.value(np.zeros(0), x), [-3.0, 3.0])


def test_load_problem_errors(tmp_path):
    missing = dict(PROBLEM)
    del missing["x0"]
    with pytest.raises(UsageError):
        load_problem(_write_problem(tmp_path, missing, "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(UsageError):
        load_problem(str(bad))
    with pytest.raises(UsageError):
        load_problem(str(tmp_path / "absent.json"))


def test_simulate_stationary_spec_writes_constant_rows(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["simulate", "--spec", "builtin:benchmark", "--k", "40",
                 "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    traj = Trajectory.from_csv(str(out / "trajectory.csv"))
    # zero sources keep the benchmark state parked at x0
    assert np.all(traj.x == traj.x[0])
    assert np.all(traj.y == 0.0)
    report = json.loads((out / "report.json").read_text())
    assert report["feasibility_violation"] <= 1e-12
    assert report["terminal_state"] == [1.0, 1.0]


def test_trajectory_csv_round_trips_bitwise(tmp_path, capsys):
    out = tmp_path / "run"
    main(["simulate", "--spec", "builtin:current-source", "--k", "25",
          "--out", str(out)])
    capsys.readouterr()
    first = out / "trajectory.csv"
    traj = Trajectory.from_csv(str(first))
    second = tmp_path / "again.csv"
    traj.to_csv(str(second))
    assert first.read_bytes() == second.read_bytes()


def test_identical_configs_produce_identical_files(tmp_path, capsys):
    outs = []
    for name in ("one", "two"):
        out = tmp_path / name
        code = main(["benchmark", "--case", "i", "--grid-points", "101",
                     "--out", str(out), "--seed", "3"])
        assert code == 0
        outs.append(out)
    capsys.readouterr()
    names = sorted(os.listdir(outs[0]))
    assert names == sorted(os.listdir(outs[1]))
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_check_kkt_continuous_terminal_contact(tmp_path, capsys):
    out = tmp_path / "kkt"
    code = main(["check-kkt", "--mode", "continuous",
                 "--reference", "builtin:benchmark-mode-iii",
                 "--tol", "1e-6", "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    report = json.loads((out / "report.json").read_text())
    assert report["satisfied"] is True
    assert report["max_residual"] <= 1e-6
    assert all(entry["pass"] for entry in report["residuals"].values())


def test_check_kkt_discrete_requires_solution(tmp_path, capsys):
    code = main(["check-kkt", "--mode", "discrete", "--out", str(tmp_path)])
    assert code == 2
    capsys.readouterr()


def test_benchmark_summary_reports_mode_optima(tmp_path, capsys):
    out = tmp_path / "bench"
    code = main(["benchmark", "--case", "all", "--grid-points", "201",
                 "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["cases"]["i"]["v2"] == pytest.approx(0.5988481275, abs=1e-6)
    assert summary["best"]["case"] == "ii"
    for case in ("i", "ii", "iii"):
        assert summary["cases"][case]["certificate"]["satisfied"] is True
        assert (out / f"analytic-{case}.csv").exists()
        assert (out / f"cost-curve-{case}.csv").exists()


def test_check_kkt_exit_1_when_tolerance_unreachable(tmp_path, capsys):
    # quadrature noise ~1e-14 can never pass a 1e-16 demand: numerical failure
    out = tmp_path / "kkt"
    code = main(["check-kkt", "--mode", "continuous",
                 "--reference", "builtin:benchmark-mode-i",
                 "--tol", "1e-16", "--out", str(out)])
    assert code == 1
    capsys.readouterr()
    report = json.loads((out / "report.json").read_text())
    assert report["satisfied"] is False
    assert report["max_residual"] > 1e-16


def test_optimize_solves_benchmark(tmp_path, capsys):
    out = tmp_path / "opt"
    code = main(["optimize", "--spec", "builtin:benchmark",
                 "--reference", "builtin:benchmark-mode-ii",
                 "--k", "50", "--epsilon", "1.0", "--tol", "1e-6",
                 "--gradient", "adjoint", "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    report = json.loads((out / "report.json").read_text())
    assert report["success"] is True
    assert report["cost"] < 0.71  # below every contact-mode cost
    traj = Trajectory.from_csv(str(out / "solution.csv"))
    assert traj.mesh.k == 50


def test_registered_field_hook():
    def factory(cfg):
        from sweepopt.dynamics import LinearField

        return LinearField(A_ctrl=np.zeros((1, 0)),
                           A_state=np.array([[float(cfg["gain"])]]))

    cli.register_field("toy-gain", factory)
    try:
        field = cli._field_from_config(
            {"kind": "registered", "name": "toy-gain", "gain": 2.0}, 1)
        assert np.allclose(field.value(np.zeros(0), np.array([3.0])), [6.0])
        with pytest.raises(UsageError):
            cli._field_from_config({"kind": "registered", "name": "nope"}, 1)
    finally:
        cli._FIELD_REGISTRY.pop("toy-gain", None)
