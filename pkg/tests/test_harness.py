import json

import pytest
import yaml

from hjhomog import cli
from hjhomog.errors import ConfigError
from hjhomog.harness import KINDS, apply_seed_override, default_config, normalize_config, run, validate_config


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


FLAT_1D = {"n": 1, "m": 1, "L": 16.0, "potential": 0.0}
SMALL_ERGODIC = {
    "kind": "ergodic-variance",
    "environment": {"n": 1, "m": 1, "L": 8.0, "cell": 1.0,
                    "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 1.0}},
    "numerics": {"L_values": [8.0, 16.0], "p": [0.5], "h": 0.5, "delta_factors": [2.0, 1.0]},
    "seeds": [0, 1, 2],
}


def test_minimal_collapse_config_gets_defaults(tmp_path):
    cfg = validate_config(write(tmp_path, "kind: collapse-demo\n"))
    assert cfg["numerics"]["eps"] == [0.2, 0.1, 0.05]
    assert cfg["numerics"]["tol"] == 1e-2
    assert cfg["environment"]["m"] == 2
    assert cfg["seeds"] == [0]


def test_unknown_kind_lists_valid_kinds(tmp_path, capsys):
    path = write(tmp_path, "kind: frobnicate\n")
    assert cli.main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "frobnicate" in err
    assert all(k in err for k in KINDS)


def test_cell_must_divide_L_with_line_number(tmp_path):
    text = "kind: cell-table\nenvironment:\n  n: 1\n  m: 1\n  L: 10\n  cell: 3\n  potential: 1.0\n" \
           "numerics:\n  p_grids: [[0, 1, 2]]\n  deltas: [1.0, 0.5]\n"
    with pytest.raises(ConfigError) as info:
        validate_config(write(tmp_path, text))
    assert any("line 6" in e and "cell=3.0 does not divide L=10.0" in e for e in info.value.errors)


def test_missing_deltas_named(tmp_path, capsys):
    text = "kind: cell-table\nenvironment:\n  n: 1\n  m: 1\n  L: 16\n  potential: 1.0\nnumerics:\n  p_grids: [[0, 1, 2]]\n"
    path = write(tmp_path, text)
    assert cli.main(["validate", str(path)]) == 2
    assert "numerics.deltas: required" in capsys.readouterr().err


def test_errors_are_aggregated():
    with pytest.raises(ConfigError) as info:
        normalize_config({"kind": "collapse-demo", "bogus": 1, "numerics": {"eps": [0.1, 0.2], "T": -1}})
    msgs = "\n".join(info.value.errors)
    assert "bogus" in msgs and "strictly decreasing" in msgs and "T" in msgs


def test_yaml_parse_error_has_line(tmp_path):
    with pytest.raises(ConfigError) as info:
        validate_config(write(tmp_path, "kind: collapse-demo\nnumerics: [1, 2\n"))
    assert "line" in info.value.errors[0]


def test_json_config(tmp_path):
    path = write(tmp_path, json.dumps({"kind": "collapse-demo", "numerics": {"eps": [0.2]}}), "cfg.json")
    assert validate_config(path)["numerics"]["eps"] == [0.2]


def test_p_grid_ranges_expand():
    cfg = normalize_config({"kind": "cell-table", "environment": FLAT_1D,
                            "numerics": {"p_grids": [{"min": -1, "max": 1, "nodes": 5}],
                                         "deltas": {"delta0": 1.0, "halvings": 1}}})
    assert cfg["numerics"]["p_grids"] == [[-1.0, -0.5, 0.0, 0.5, 1.0]]
    assert cfg["numerics"]["deltas"] == [1.0, 0.5]


def test_default_config_for_every_kind():
    for kind in KINDS:
        assert default_config(kind)["kind"] == kind
    assert len(default_config("ergodic-variance")["seeds"]) == 8


def test_seed_override_keeps_table_seeds_independent():
    cfg = normalize_config({"kind": "convergence-study"})
    out = apply_seed_override(cfg, 40)
    assert out["seeds"] == [40]
    assert out["numerics"]["table"]["seeds"] == [41, 42]


def test_collapse_run_is_deterministic(tmp_path):
    path = write(tmp_path, yaml.safe_dump({"kind": "collapse-demo", "numerics": {"eps": [0.2, 0.1]}}))
    a = run(path, out=tmp_path / "a")
    b = run(path, out=tmp_path / "b")
    assert a.passed and b.passed
    assert a.files == b.files and "summary.json" in a.files
    for name in a.files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert a.manifest["config_hash"] == b.manifest["config_hash"]
    assert a.manifest["files"] == b.manifest["files"]


def test_cli_run_writes_artifact(tmp_path, capsys):
    path = write(tmp_path, "kind: collapse-demo\nnumerics:\n  eps: [0.2]\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o"), "--seed-override", "5"]) == 0
    assert "PASS collapse_error_eps0.2" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["seed_override"] == 5 and manifest["config"]["seeds"] == [5]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["passed"] and {"name", "passed", "asserted", "value", "threshold", "data"} <= set(summary["verdicts"][0])


def test_failed_verdict_exit_code(tmp_path):
    path = write(tmp_path, "kind: collapse-demo\nnumerics:\n  eps: [0.2]\n  safety: 1.0\n  tol: 1.0e-6\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == 1


def test_solver_error_exit_code(tmp_path, capsys):
    cfg = {"kind": "metric-study", "environment": FLAT_1D, "model": {"kind": "uncoupled"},
           "numerics": {"mu": 1.0, "t_schedule": [2.0, 4.0], "h": 0.25,
                        "table": {"p_grids": [[-0.5, 0.0, 0.5]], "deltas": [1.0, 0.5], "h": 0.5}}}
    path = write(tmp_path, yaml.safe_dump(cfg))
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "support function" in capsys.readouterr().err


def test_metric_study_consistency(tmp_path):
    cfg = {"kind": "metric-study", "environment": FLAT_1D, "model": {"kind": "uncoupled"},
           "numerics": {"mu": 1.0, "t_schedule": [2.0, 4.0], "h": 0.25,
                        "table": {"p_grids": [{"min": -2, "max": 2, "nodes": 81}], "deltas": [1.0, 0.5], "h": 0.5}}}
    art = run(cfg, out=tmp_path)
    names = {v["name"] for v in art.summary["verdicts"]}
    assert "support_function_mu1" in names and art.passed


def test_cell_table_run_and_table_show(tmp_path, capsys):
    cfg = {"kind": "cell-table", "environment": {**FLAT_1D, "potential": 1.0}, "model": {"kind": "uncoupled"},
           "numerics": {"p_grids": [[-1.0, 0.0, 1.0]], "r_grid": [0.0], "deltas": [1.0, 0.5], "h": 0.5}}
    art = run(cfg, out=tmp_path)
    assert art.passed
    assert cli.main(["table", "show", str(tmp_path / "table.json")]) == 0
    out = capsys.readouterr().out
    assert "p[0]: 3 nodes" in out and "PASS convexity" in out


def test_ergodic_workers_match_serial(tmp_path):
    a = run(SMALL_ERGODIC, out=tmp_path / "a", workers=1)
    b = run(SMALL_ERGODIC, out=tmp_path / "b", workers=2)
    assert (tmp_path / "a" / "estimates.csv").read_bytes() == (tmp_path / "b" / "estimates.csv").read_bytes()
    assert "spread_decreasing" in {v["name"] for v in a.summary["verdicts"]}


def test_property_suite_small(tmp_path):
    cfg = {"kind": "property-suite", "environment": {"L": 8.0},
           "numerics": {"assumptions": {"samples": 2000}, "contraction": {"pairs": 2, "T": 0.05}}}
    art = run(cfg, out=tmp_path)
    assert art.passed, art.summary
    assert "contraction.csv" in art.files


def test_version(capsys):
    assert cli.main(["version"]) == 0
    assert capsys.readouterr().out.strip()
