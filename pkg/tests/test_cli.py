import csv
import json

import numpy as np
import pytest

from stochmpc.cli import EXIT_CONFIG, EXIT_INFEASIBLE, PER_STEP_HEADER, main
from stochmpc.config import ConfigError, build_controller, dump_json, parse_config, preset


def test_presets():
    t1 = preset("table1")
    assert t1.constraints.p == 0.8061
    assert t1.controller.N == 10
    assert t1.simulation.T == 40 and t1.simulation.rollouts == 10_000
    assert len(t1.variants) == 7
    b = preset("appendixB")
    assert b.constraints.p == 0.814
    assert b.terminal.type == "halfspace-from-tightening"
    with pytest.raises(ConfigError):
        preset("table2")


@pytest.mark.parametrize("name", ["table1", "appendixB"])
def test_round_trip(name):
    cfg = preset(name)
    again = parse_config(cfg.to_json())
    assert again == cfg
    assert dump_json(again) == dump_json(cfg)


def test_unknown_keys_rejected_with_path():
    data = dump_json(preset("table1"))
    data["system"]["foo"] = 1
    with pytest.raises(ConfigError, match=r"system\.foo"):
        parse_config(data)
    data = dump_json(preset("table1"))
    data["controller"]["K"] = [["x"]]
    with pytest.raises(ConfigError, match=r"controller\.K\[0\]\[0\]"):
        parse_config(data)
    data = dump_json(preset("table1"))
    data["controller"]["variant"] = "mystery"
    with pytest.raises(ConfigError, match="controller.variant"):
        parse_config(data)


def test_preset_builds_controllers():
    cfg = preset("table1")
    for v in cfg.variants:
        ctl = build_controller(cfg, v)
        assert ctl.variant is v


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_halfspace_preset_indirect_one_sided(tmp_path):
    code = main(["run", "--preset", "appendixB", "--controller", "indirect", "--prs", "one-sided",
                 "--rollouts", "200", "--out", str(tmp_path)])
    assert code == 0
    rows = _read_csv(tmp_path / "per_step.csv")
    assert rows[0] == PER_STEP_HEADER
    mean_u = np.array([float(r[4]) for r in rows[1:]])
    assert len(mean_u) == 40
    np.testing.assert_allclose(mean_u[1:], -0.1624, atol=1e-3)
    summary = json.loads((tmp_path / "summary.json").read_text())
    (row,) = summary["controllers"]
    assert row["controller"] == "indirect" and row["cost_ratio"] is None


def test_table1_outputs_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["run", "--preset", "table1", "--rollouts", "1", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    names = [r["controller"] for r in summary["controllers"]]
    assert sorted(names) == sorted(["lqr", "proposed", "case-min", "indirect", "nominal", "fixed-gain", "case-reset"])
    for name in names:
        a = (tmp_path / "a" / name / "per_step.csv").read_bytes()
        b = (tmp_path / "b" / name / "per_step.csv").read_bytes()
        assert a == b
        rows = _read_csv(tmp_path / "a" / name / "per_step.csv")
        assert all(len(r) == 7 for r in rows)
    fixed = next(r for r in summary["controllers"] if r["controller"] == "fixed-gain")
    assert fixed["cost_ratio"] == 1.0


def test_rollouts_csv(tmp_path):
    code = main(["run", "--preset", "table1", "--controller", "proposed", "--controller", "indirect",
                 "--rollouts", "3", "--save-rollouts", "2", "--out", str(tmp_path)])
    assert code == 0
    rows = _read_csv(tmp_path / "proposed" / "rollouts.csv")
    assert rows[0][:2] == ["rollout", "k"]
    assert len(rows) == 1 + 2 * 40
    assert not (tmp_path / "lqr").exists()


def test_float_format(tmp_path):
    main(["run", "--preset", "table1", "--controller", "lqr", "--rollouts", "7", "--out", str(tmp_path)])
    for row in _read_csv(tmp_path / "per_step.csv")[1:]:
        for cell in row[1:]:
            assert cell == "nan" or f"{float(cell):.9g}" == cell


def test_config_file_and_exit_codes(tmp_path, capsys):
    data = dump_json(preset("appendixB"))
    data["controller"]["variant"] = "indirect"
    data["simulation"].update(rollouts=5, x0=[-5.0])
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(data))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE
    assert "k=0" in capsys.readouterr().err

    data["simulation"]["x0"] = [0.0]
    data["bogus"] = {}
    path.write_text(json.dumps(data))
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_preset_command(capsys):
    assert main(["preset", "table1"]) == 0
    out = capsys.readouterr().out
    assert parse_config(out) == preset("table1")
