import json
import math
import time

import numpy as np
import pytest

from g2t.data import read_trace
from g2t.errors import ConfigError
from g2t.estimators import EstimatorSuite
from g2t.experiment import (
    ExperimentConfig,
    Problem,
    RunClock,
    build_problem,
    run_experiment,
    run_export,
    run_profile,
    run_select,
    summarize,
)
from g2t.miqcp import parse_miqcp
from g2t.selection import time_of_support, CostProfile

LOGREG5 = {"synth": {"kind": "logreg", "size": 100, "seed": 0, "dim": 5}}
COUNTS = {"synth": {"kind": "counts", "size": 30, "seed": 0, "groups": 3}}


def config(**kw):
    base = dict(model="logreg", data=LOGREG5, family="diag", learning_rates=[1e-3], time_budget=1.0,
                warm_start_steps=50, record_every=20, eval_samples=50, mode="base",
                profile_warmup=1, profile_reps=3, M=50)
    base.update(kw)
    return ExperimentConfig(**base)


def test_base_smoke_improves_over_five_seeds(tmp_path):
    cfg = config(time_budget=5.0, seeds=[0, 1, 2, 3, 4], record_every=100)
    report = run_experiment(cfg, tmp_path)
    gains = []
    for seed in cfg.seeds:
        records = read_trace(tmp_path / f"trace_lr0_seed{seed}.csv")
        assert len(records) >= 2
        walls = [r.wall_seconds for r in records]
        assert all(b > a for a, b in zip(walls, walls[1:]))
        assert records[-1].wall_seconds >= 5.0
        gains.append(records[-1].elbo - records[0].elbo)
    assert np.mean(gains) > 0
    assert report["runs"][0]["mean_final_elbo"] > -1e9


class NoisySuite:
    """The real suite plus two injected control variates: tiny noise that is slow to compute."""

    labels = ("n1", "n2")
    J = 2

    def __init__(self, model, delay=2e-3):
        self.inner = EstimatorSuite(model, ())
        self.delay = delay

    def _noise(self, xi, k):
        # mean-zero, one entry per variational parameter
        return 1e-9 * np.roll(np.concatenate([xi, xi ** 2 - 1], axis=-1), k + 1, axis=-1)

    def gradient(self, params, xi, weights=None):
        xi = np.atleast_2d(xi)
        g = self.inner.gradient(params, xi)
        if weights is not None:
            for k, a in enumerate(weights):
                if a != 0:
                    time.sleep(self.delay)
                    g = g + a * self._noise(xi, k).mean(axis=0)
        return g

    def stat_evaluators(self, params):
        base, _ = self.inner.stat_evaluators(params)
        cvs = []
        for k in range(2):
            def cv(p, xi, k=k):
                return self._noise(np.atleast_2d(xi), k)
            cv.batched = True
            cvs.append(cv)
        return base, cvs


def test_useless_control_variates_give_empty_support():
    cfg = config(mode="cv-auto", control_variates=[], time_budget=1.0, learning_rates=[1e-4])
    problem = build_problem(cfg)
    problem = Problem(problem.model, problem.family, NoisySuite(problem.model))
    report = run_experiment(cfg, problem=problem)
    decisions = report["decisions"][0]["0"]
    assert math.isfinite(report["records"][0][0][-1].elbo)
    assert len(decisions) == 3
    assert all(d["selection"] == "cv:00" for d in decisions)


@pytest.mark.parametrize("mode, extra", [
    ("base", {}),
    ("cv-fixed", {"support": ["c1"], "fractions": [0.0]}),
    ("pool", {"members": ["STL"], "fractions": [0.0]}),
])
def test_seeded_runs_are_reproducible(mode, extra):
    cfg = config(mode=mode, max_steps=300, time_budget=60.0, record_every=50, seeds=[3], **extra)
    problem = build_problem(cfg)
    a = run_experiment(cfg, problem=problem)["records"][0][3]
    b = run_experiment(cfg, problem=problem)["records"][0][3]
    assert [(r.step, r.elbo, r.selection) for r in a] == [(r.step, r.elbo, r.selection) for r in b]
    assert a[-1].step == 300


def test_profile_reports():
    base = run_profile(config(mode="base", profile_reps=5))
    assert base["t0"] > 0 and base["t"] == []
    three = run_profile(config(model="hier_poisson", data=COUNTS, mode="cv-auto", profile_reps=5))
    assert len(three["t"]) == 3
    assert three["labels"] == ["c1", "c2", "c3"]


def test_profile_median_stability():
    cfg = config(model="hier_poisson", data=COUNTS, mode="cv-auto", profile_warmup=5, profile_reps=31)
    problem = build_problem(cfg)
    a, b = run_profile(cfg, problem), run_profile(cfg, problem)
    assert abs(a["t0"] - b["t0"]) <= 0.25 * max(a["t0"], b["t0"])


def test_select_and_export():
    cfg = config(model="hier_poisson", data=COUNTS, mode="cv-auto")
    info = run_select(cfg)
    assert info["selection"].startswith("cv:") and len(info["selection"]) == 6
    assert info["g2hat"] >= 0
    problem = parse_miqcp(run_export(cfg))
    assert problem.J == 3
    with pytest.raises(ConfigError):
        run_select(config(mode="base"))


def test_selection_changes_only_at_reselection_times():
    cfg = config(model="hier_poisson", data=COUNTS, mode="cv-auto", time_budget=3.0, record_every=25,
                 learning_rates=[1e-5], M=100)
    report = run_experiment(cfg)
    records = report["records"][0][0]
    decisions = report["decisions"][0]["0"]
    assert len(decisions) == 3 and records[-1].elbo == records[-1].elbo
    decision_steps = {d["step"] for d in decisions}
    triggers = [0.0, 0.3, 1.5]
    for d, t in zip(decisions, triggers):
        assert d["time"] >= t
    for prev, rec in zip(records, records[1:]):
        if rec.selection != prev.selection:
            assert rec.step in decision_steps


def test_summary_is_a_fold_of_the_traces(tmp_path):
    cfg = config(seeds=[0, 1], time_budget=0.5, learning_rates=[1e-3, 1e-4])
    run_experiment(cfg, tmp_path)
    written = json.loads((tmp_path / "summary.json").read_text())
    for ri, run in enumerate(written["runs"]):
        traces = {s: read_trace(tmp_path / f"trace_lr{ri}_seed{s}.csv") for s in cfg.seeds}
        refold = json.loads(json.dumps(summarize(traces)))
        for key in ("seeds", "mean_final_elbo", "total_steps", "wall_seconds"):
            assert refold[key] == run[key]


def test_cost_model_matches_wall_time():
    cfg = config(model="logreg", data={"synth": {"kind": "logreg", "size": 100, "seed": 0, "dim": 10}},
                 family="chol", mode="cv-auto", time_budget=6.0, record_every=10 ** 9, M=100,
                 profile_warmup=5, profile_reps=31, learning_rates=[1e-4], warm_start_rate=1e-3)
    report = run_experiment(cfg)
    decisions = report["decisions"][0]["0"]
    final = report["records"][0][0][-1]
    labels = report["control_variates"]
    prof = report["profiles"][0]["0"]
    profile = CostProfile(prof["t0"], prof["t"])
    predicted = measured = 0.0
    for k, d in enumerate(decisions):
        end_time = decisions[k + 1]["time"] - decisions[k + 1]["seconds"] if k + 1 < len(decisions) else final.wall_seconds
        end_step = decisions[k + 1]["step"] if k + 1 < len(decisions) else final.step
        support = tuple(i for i, a in enumerate(d["weights"]) if a != 0)
        predicted += (end_step - d["step"]) * time_of_support(profile, support)
        measured += end_time - d["time"]
    assert len(labels) == 3
    assert abs(predicted - measured) <= 0.2 * measured, (predicted, measured)


def test_config_validation():
    with pytest.raises(ConfigError):
        config(time_budget=0.0)
    with pytest.raises(ConfigError):
        config(learning_rates=[-1e-3])
    with pytest.raises(ConfigError):
        config(learning_rates=[])
    with pytest.raises(ConfigError):
        config(fractions=[0.0, 1.0])
    with pytest.raises(ConfigError):
        config(seeds=[])
    with pytest.raises(ConfigError):
        config(mode="magic")
    with pytest.raises(ConfigError):
        config(control_variates=["c4"])
    with pytest.raises(ConfigError):
        config(mode="cv-fixed", control_variates=["c1"], support=["c3"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": "logreg", "data": LOGREG5, "colour": "red"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": "logreg", "data": LOGREG5, "optimizer": {"speed": 1}})
    with pytest.raises(ConfigError):
        build_problem(config(data={"path": "/nonexistent/file.svm"}))
    with pytest.raises(ConfigError):
        build_problem(config(model="hier_poisson", data=LOGREG5))


def test_config_from_dict_defaults_and_grid():
    cfg = ExperimentConfig.from_dict({
        "model": {"kind": "logreg"}, "data": LOGREG5,
        "optimizer": {"learning_rate_grid": {"low": 1e-6, "high": 1e-3, "count": 12}},
        "seeds": 4,
    })
    assert len(cfg.learning_rates) == 12
    assert cfg.learning_rates[0] == pytest.approx(1e-6) and cfg.learning_rates[-1] == pytest.approx(1e-3)
    ratios = np.diff(np.log(cfg.learning_rates))
    np.testing.assert_allclose(ratios, ratios[0])
    assert cfg.seeds == [4]
    assert cfg.momentum == 0.9 and cfg.batch_size == 5
    assert cfg.warm_start_steps == 300 and cfg.warm_start_rate == 1e-5
    assert cfg.resolved_family == "chol" and cfg.resolved_M == 200
    assert ExperimentConfig.from_dict({"model": "hier_poisson", "data": COUNTS}).resolved_M == 400


def test_run_clock_pauses():
    now = [0.0]
    clock = RunClock(lambda: now[0])
    now[0] = 2.0
    clock.pause()
    now[0] = 5.0
    assert clock.elapsed() == 2.0
    clock.resume()
    now[0] = 6.0
    assert clock.elapsed() == 3.0


def test_summarize_selection_history():
    from g2t.data import TraceRecord
    nan = math.nan
    recs = [TraceRecord(0.0, 0, -5.0, "cv:000", nan, nan, 0),
            TraceRecord(0.1, 0, -5.0, "cv:100", 2.0, 1.0, 0),
            TraceRecord(0.5, 10, -4.0, "cv:100", 2.0, 1.0, 0),
            TraceRecord(0.9, 20, -3.0, "cv:000", 3.0, 0.5, 0)]
    s = summarize({0: recs})
    assert [h["selection"] for h in s["seeds"]["0"]["selection_history"]] == ["cv:100", "cv:000"]
    assert s["mean_final_elbo"] == -3.0 and s["total_steps"] == 20


def test_divergence_is_recorded_not_raised():
    cfg = config(model="hier_poisson", data=COUNTS, learning_rates=[10.0], time_budget=2.0, warm_start_steps=0)
    records = run_experiment(cfg)["records"][0][0]
    assert math.isnan(records[-1].elbo)
    assert records[-1].wall_seconds < 2.0


class OverflowSuite(NoisySuite):
    def _noise(self, xi, k):
        return np.full(np.shape(np.concatenate([xi, xi], axis=-1)), np.inf)


def test_overflowing_selection_is_recorded_as_divergence():
    cfg = config(mode="cv-auto", control_variates=[], time_budget=1.0, learning_rates=[1e-4])
    problem = build_problem(cfg)
    problem = Problem(problem.model, problem.family, OverflowSuite(problem.model))
    report = run_experiment(cfg, problem=problem)
    assert math.isnan(report["records"][0][0][-1].elbo)
    assert report["decisions"][0]["0"] == []
