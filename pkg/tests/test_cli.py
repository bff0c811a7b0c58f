import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from riskdp import cli, oracle
from riskdp.errors import ConfigError
from riskdp.problem_io import mdp_from_json, parse_xgrid, policy_from_json, soc_from_json

TWO_ACTION = {
    "T": 1, "states": ["s", "b"], "actions": ["a", "a'"], "s0": "s",
    "kernels": [[[0.5, 0.5], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]],
    "costs": [[[0.0, 0.6], [0.0, 0.6]], [[0.0, 0.0], [1.0, 1.0]]],
    "risk": {"kind": "cvar", "alpha": 0.5}, "xgrid": {"mode": "lattice", "K": 5},
}
DISCOUNTED = {
    "gamma": 0.5, "costs": [[0.0, 0.5], [1.0, 0.5]],
    "kernels": [[[0.5, 0.5], [1.0, 0.0]], [[0.0, 1.0], [0.5, 0.5]]],
    "risk": {"kind": "cvar", "alpha": 0.5}, "xgrid": {"mode": "uniform", "h": 0.0625},
}
CONTROL = {
    "T": 2, "state_box": [[-1.0, 1.0]], "action_box": [[-1.0, 1.0]],
    "dynamics": {"kind": "linear", "A": [[0.8]], "B": [[0.5]], "clamp": True},
    "cost": {"kind": "quadratic", "scale": 0.5},
    "noise": [[-0.2, 0.25], [0.0, 0.5], [0.2, 0.25]], "L": 1.4142135623730951, "s0": [0.5],
    "risk": {"kind": "cvar", "alpha": 0.5},
    "grids": {"hS": 0.25, "hA": 0.25, "xgrid": {"mode": "uniform", "h": 0.25}},
}


@pytest.fixture(scope="module")
def schema():
    text = resources.files("riskdp").joinpath("schemas/output.schema.json").read_text()
    return json.loads(text)


def put(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def run(argv):
    return cli.main([str(a) for a in argv])


def read(path):
    return json.loads(open(path).read())


def test_solve_two_action(tmp_path, schema):
    out = tmp_path / "out.json"
    assert run(["solve", put(tmp_path, "p.json", TWO_ACTION), "--out", out]) == 0
    data = read(out)
    assert data["risk"] == pytest.approx(0.6, abs=1e-12)
    jsonschema.validate(data, schema)


def test_missing_file_exit_code(tmp_path):
    assert run(["solve", tmp_path / "nope.json"]) == cli.EXIT_CONFIG


def test_malformed_json_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert run(["solve", path]) == cli.EXIT_CONFIG


def test_bad_alpha_exit_code(tmp_path):
    assert run(["solve", put(tmp_path, "p.json", TWO_ACTION), "--alpha", "1.5"]) == cli.EXIT_CONFIG


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["solve", put(tmp_path, "p.json", TWO_ACTION), "--bogus"])
    assert exc.value.code == 2


def test_missing_output_directory(tmp_path):
    path = put(tmp_path, "p.json", TWO_ACTION)
    assert run(["solve", path, "--out", tmp_path / "no" / "out.json"]) == cli.EXIT_CONFIG


def test_solver_error_exit_code(tmp_path):
    bad = dict(CONTROL, dynamics={"kind": "linear", "A": [[1.0]], "B": [[1.0]], "clamp": False})
    assert run(["soc-solve", put(tmp_path, "c.json", bad)]) == cli.EXIT_NUMERIC


def test_oracle_check_passes(tmp_path, schema):
    out = tmp_path / "report.json"
    assert run(["oracle-check", put(tmp_path, "p.json", TWO_ACTION), "--out", out]) == 0
    report = read(out)
    assert report["violations"] == []
    assert all(c["passed"] for c in report["checks"])
    jsonschema.validate(report, schema)


def test_oracle_check_reports_violation(tmp_path, monkeypatch):
    real = oracle.oracle_optimal_risk
    monkeypatch.setattr(oracle, "oracle_optimal_risk",
                        lambda *a, **k: (real(*a, **k)[0] + 0.1, None))
    out = tmp_path / "report.json"
    assert run(["oracle-check", put(tmp_path, "p.json", TWO_ACTION), "--out", out]) == \
        cli.EXIT_ORACLE
    assert "optimal_risk_matches_enumeration" in read(out)["violations"]


@pytest.mark.parametrize("extra", [[], ["--xgrid", "uniform:0.07"], ["--refine"],
                                   ["--risk", '{"kind":"phi","phi":"chi2","tau":0.5,"L":3}',
                                    "--xgrid", "uniform:0.05", "--theta-grid", "17"]])
def test_policy_round_trip(tmp_path, schema, extra):
    problem = put(tmp_path, "p.json", TWO_ACTION)
    solved, evaluated = tmp_path / "s.json", tmp_path / "e.json"
    assert run(["solve", problem, "--out", solved, *extra]) == 0
    assert run(["evaluate", problem, "--policy", solved, "--out", evaluated, *extra]) == 0
    a, b = read(solved), read(evaluated)
    jsonschema.validate(b, schema)
    if "--refine" not in extra:
        assert abs(a["risk"] - b["risk"]) <= 1e-12
    else:
        assert b["risk"] <= a["risk"] + 1e-12


def test_solve_is_byte_identical(tmp_path):
    problem = put(tmp_path, "p.json", TWO_ACTION)
    run(["solve", problem, "--out", tmp_path / "a.json"])
    run(["solve", problem, "--out", tmp_path / "b.json"])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_sweep_outputs(tmp_path, schema):
    problem = put(tmp_path, "p.json", TWO_ACTION)
    out = tmp_path / "r.csv"
    args = ["sweep", problem, "--alpha", "0.9", "--xgrid", "uniform:0.015625", "--n-list",
            "2^5..2^8", "--reps", "4", "--seed", "3", "--eps", "0.5", "--out", out]
    assert run([*args, "--jobs", "1"]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["n", "rep", "error", "seconds"]
    assert len(rows) == 1 + 4 * 4
    assert all(r[3] == "" for r in rows[1:])
    summary = read(tmp_path / "r.summary.json")
    jsonschema.validate(summary, schema)
    assert summary["n_list"] == [32, 64, 128, 256]
    assert summary["sample_size"]["calibration"] == "proof-calibrated"
    first = out.read_bytes(), (tmp_path / "r.summary.json").read_bytes()
    assert run([*args, "--jobs", "2"]) == 0
    assert (out.read_bytes(), (tmp_path / "r.summary.json").read_bytes()) == first


def test_sweep_timing_column(tmp_path):
    out = tmp_path / "r.csv"
    assert run(["sweep", put(tmp_path, "p.json", TWO_ACTION), "--n-list", "8,16", "--reps", "2",
                "--jobs", "1", "--timing", "--out", out]) == 0
    rows = list(csv.reader(open(out)))[1:]
    assert all(float(r[3]) >= 0 for r in rows)


def test_soc_solve(tmp_path, schema):
    out = tmp_path / "o.json"
    assert run(["soc-solve", put(tmp_path, "c.json", CONTROL), "--out", out]) == 0
    data = read(out)
    assert data["risk"] == pytest.approx(0.291768798828125, abs=1e-12)
    assert data["refinement_bound"] > 0
    jsonschema.validate(data, schema)


def test_horizon_solve(tmp_path, schema):
    out = tmp_path / "o.json"
    assert run(["horizon-solve", put(tmp_path, "d.json", DISCOUNTED), "--eps-trunc", "0.05",
                "--out", out]) == 0
    data = read(out)
    jsonschema.validate(data, schema)
    assert data["T"] == 7  # L_C gamma^T / (1 - gamma) = 4 * 0.5^T: 0.0625 at 6, 0.03125 at 7
    assert data["epsilon_trunc"] <= 0.05
    res = data["residual"]
    assert res["value"] <= res["bound"]
    out2 = tmp_path / "o2.json"
    run(["horizon-solve", put(tmp_path, "d.json", DISCOUNTED), "--eps-trunc", "0.05",
         "--out", out2])
    assert out.read_bytes() == out2.read_bytes()


def test_horizon_solve_control(tmp_path, schema):
    out = tmp_path / "o.json"
    assert run(["horizon-solve", put(tmp_path, "c.json", CONTROL), "--gamma", "0.5",
                "--eps-trunc", "0.2", "--out", out]) == 0
    data = read(out)
    jsonschema.validate(data, schema)
    assert data["residual"] is None


def test_horizon_needs_gamma(tmp_path):
    data = {k: v for k, v in DISCOUNTED.items() if k != "gamma"}
    assert run(["horizon-solve", put(tmp_path, "d.json", data)]) == cli.EXIT_CONFIG


def test_log_level_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RISKDP_LOG", "debug")
    assert run(["solve", put(tmp_path, "p.json", TWO_ACTION), "--out", tmp_path / "o.json"]) == 0


# --- problem files -----------------------------------------------------------

def test_per_stage_arrays_and_labels():
    data = dict(TWO_ACTION)
    data["kernels"] = [TWO_ACTION["kernels"]]
    run_ = mdp_from_json(data)
    assert run_.s0 == 0 and run_.mdp.T == 1
    with pytest.raises(ConfigError):
        mdp_from_json(dict(TWO_ACTION, s0="nowhere"))
    with pytest.raises(ConfigError):
        mdp_from_json(dict(TWO_ACTION, states=["only-one"]))
    with pytest.raises(ConfigError):
        mdp_from_json(dict(TWO_ACTION, kernels=[[[[[0.5]]]]]))
    with pytest.raises(ConfigError):
        mdp_from_json({"T": 1, "costs": [[0.0]]})


def test_xgrid_parsing():
    assert parse_xgrid("lattice:4").K == 4
    assert parse_xgrid({"mode": "uniform", "h": 0.5}).h == 0.5
    for bad in ["lattice", "lattice:2.5", {"mode": "spline"}, {"mode": "uniform"}]:
        with pytest.raises(ConfigError):
            parse_xgrid(bad)


def test_control_file_validation():
    run_ = soc_from_json(CONTROL)
    assert run_.problem.T == 2 and np.allclose(run_.s0, [0.5])
    with pytest.raises(ConfigError):
        soc_from_json(dict(CONTROL, dynamics={"kind": "table"}))
    with pytest.raises(ConfigError):
        soc_from_json(dict(CONTROL, s0=[0.1, 0.2]))
    with pytest.raises(ConfigError):
        soc_from_json(dict(CONTROL, noise=[[0.0, 0.5]]))


def test_policy_file_needs_nodes():
    with pytest.raises(ConfigError):
        policy_from_json({"actions": [[[0]]]})


def test_n_list_parsing():
    assert cli.parse_n_list("2^6..2^8") == [64, 128, 256]
    assert cli.parse_n_list("5, 10,20") == [5, 10, 20]
    with pytest.raises(ConfigError):
        cli.parse_n_list("a,b")
