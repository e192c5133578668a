import json

import pytest
import yaml

from g2t import bounds as bd
from g2t.cli import main
from g2t.data import read_trace


def _config(tmp_path, **overrides):
    raw = {
        "model": {"kind": "hier_poisson"},
        "data": {"synth": {"kind": "counts", "size": 20, "seed": 0}},
        "optimizer": {"learning_rate": 1e-5, "time_budget": 0.5, "warm_start_steps": 20},
        "selection": {"mode": "cv-auto", "M": 40, "profile_warmup": 1, "profile_reps": 3},
        "record_every": 50,
        "eval_samples": 20,
        "seeds": [0, 1],
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_bounds_sc_smooth_worked_example(capsys):
    assert main(["bounds", "--lam", "2", "--L", "4", "--K", "100", "--g2", "100", "--rows", "sc_smooth"]) == 0
    out = capsys.readouterr().out
    assert float(out.split("bound ")[1].split()[0]) == 2.0


def test_bounds_not_applicable_rows(capsys):
    assert main(["bounds", "--lam", "0", "--L", "4", "--convex", "--K", "100", "--g2", "100",
                 "--df", "1", "--dw", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    sc = [ln for ln in lines if ln.split()[0] in ("sc", "sc+smooth")]
    assert len(sc) == 2 and all("not applicable" in ln for ln in sc)
    assert any("bound" in ln for ln in lines)


def test_bounds_momentum_row_matches_theta(capsys):
    args = ["bounds", "--lam", "1", "--L", "2", "--K", "50", "--g2", "10", "--beta", "0.9"]
    assert main(args) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    query = bd.BoundQuery(bd.ObjectiveClass(1.0, 2.0, True), 50, 10.0, 0.9, 0.0, 0.0)
    for row in bd.Row:
        line = next(ln for ln in lines if ln.split()[0] == row.value)
        if "bound" in line:
            assert float(line.split("bound ")[1].split()[0]) == pytest.approx(bd.theta(query, row), rel=1e-9)


def test_bounds_bad_flags_exit_2(capsys):
    assert main(["bounds", "--K", "0", "--g2", "1"]) == 2
    assert main(["bounds", "--K", "5"]) == 2
    assert main(["nonsense"]) == 2


def test_optimize_writes_traces_and_summary(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["optimize", "--config", str(_config(tmp_path)), "--out", str(out), "--seed", "7"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["runs"][0]["seeds"]) == {"7", "1"}
    for seed in (7, 1):
        records = read_trace(out / f"trace_lr0_seed{seed}.csv")
        assert records and records[0].seed == seed
        assert records[-1].wall_seconds >= 0.5
        assert all(r.elbo == r.elbo for r in records)
    assert "mean final ELBO" in capsys.readouterr().out


def test_time_budget_flag(tmp_path):
    out = tmp_path / "run"
    path = _config(tmp_path, seeds=[0], selection={"mode": "base"})
    assert main(["optimize", "--config", str(path), "--out", str(out), "--time-budget", "0.2"]) == 0
    records = read_trace(out / "trace_lr0_seed0.csv")
    assert 0.2 <= records[-1].wall_seconds < 1.0


def test_profile_select_export(tmp_path, capsys):
    path = _config(tmp_path)
    assert main(["profile", "--config", str(path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert len(report["t"]) == 3
    assert main(["select", "--config", str(path), "--out", str(tmp_path / "sel")]) == 0
    capsys.readouterr()
    assert (tmp_path / "sel" / "selection.json").exists()
    assert main(["export-miqcp", "--config", str(path)]) == 0
    assert capsys.readouterr().out.startswith("MIQCP")


def test_config_errors_exit_2(tmp_path):
    assert main(["optimize", "--out", str(tmp_path)]) == 2
    assert main(["optimize", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2
    bad = _config(tmp_path, optimizer={"time_budget": -1})
    assert main(["optimize", "--config", str(bad), "--out", str(tmp_path)]) == 2
    garbled = tmp_path / "garbled.yaml"
    garbled.write_text("model: [unclosed\n")
    assert main(["profile", "--config", str(garbled)]) == 2
    assert main(["select", "--config", str(_config(tmp_path, selection={"mode": "base"}))]) == 2


def test_runtime_error_exit_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = _config(tmp_path, seeds=[0], selection={"mode": "base"})
    # the output directory cannot be created below a regular file
    assert main(["optimize", "--config", str(path), "--out", str(blocker / "sub")]) == 1
