"""Config-driven SGVI runs with adaptive estimator selection.

Config schema (YAML or JSON)::

    model:
      kind: logreg | hier_poisson | bnn_a | bnn_b
      hyper: {}                 # keyword arguments of the model constructor
    data:                       # exactly one of `synth` or `path`
      synth: {kind: logreg | regression | counts, size: 100, seed: 0, <options>}
      path: file.csv            # with format: libsvm | table, target: <column>
      max_rows: null            # keep only the first rows
    family: chol | diag         # default: chol for logreg, diag otherwise
    optimizer:
      learning_rate: 1e-3       # a number or a list (grid; every rate is run)
      learning_rate_grid: null  # or {low: 1e-6, high: 1e-3, count: 12}, log-uniform
      momentum: 0.9
      time_budget: 10.0         # seconds of run clock per (rate, seed)
      max_steps: null           # optional hard cap on optimization steps
      batch_size: 5
      warm_start_steps: 300
      warm_start_rate: 1e-5
      init_log_scale: 0.0
    selection:
      mode: base | pool | cv-auto | cv-fixed
      members: [Rep, Miller, STL]     # pool mode
      control_variates: null          # default: every one available for the model
      support: []                     # cv-fixed mode, e.g. [c1, c3]
      M: null                         # default 400; 200 for full-rank logreg
      fractions: [0.0, 0.1, 0.5]
      profile_warmup: 3
      profile_reps: 15
      workers: 1
    record_every: 100           # optimization steps between ELBO records
    eval_samples: 100
    eval_seed: 12345
    seeds: [0]
    out: runs/example

The run clock starts after the warm start.  Profiling, estimating G^2 and
solving count against the budget; ELBO records do not (the clock is paused).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import data as data_mod
from .errors import ConfigError, DomainError, G2TError, UnavailableControlVariate
from .estimators import CONTROL_VARIATES, EstimatorSuite
from .miqcp import export_miqcp
from .models import MODEL_KINDS, ModelSpec, elbo_estimate, make_model
from .selection import (
    DEFAULT_FRACTIONS,
    CostProfile,
    PoolMember,
    SelectionDecision,
    collect_quadratic_stats,
    fixed_support_decision,
    profile_cost,
    profile_cv_costs,
    reselection_schedule,
    select_from_pool,
    solve_support_enumeration,
)
from .variational import CHOLESKY, DIAG, VariationalParams

log = logging.getLogger(__name__)

MODES = ("base", "pool", "cv-auto", "cv-fixed")
POOL_MEMBERS = ("Rep", "Miller", "STL")
PROFILE_BLOCK = 5  # consecutive steps per timed rep


@dataclass
class ExperimentConfig:
    model: str
    data: dict
    hyper: dict = field(default_factory=dict)
    family: Optional[str] = None
    learning_rates: List[float] = field(default_factory=lambda: [1e-3])
    momentum: float = 0.9
    time_budget: float = 10.0
    max_steps: Optional[int] = None
    batch_size: int = 5
    warm_start_steps: int = 300
    warm_start_rate: float = 1e-5
    init_log_scale: float = 0.0
    mode: str = "cv-auto"
    members: List[str] = field(default_factory=lambda: list(POOL_MEMBERS))
    control_variates: Optional[List[str]] = None
    support: List[str] = field(default_factory=list)
    M: Optional[int] = None
    fractions: List[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    profile_warmup: int = 3
    profile_reps: int = 15
    workers: int = 1
    record_every: int = 100
    eval_samples: int = 100
    eval_seed: int = 12345
    seeds: List[int] = field(default_factory=lambda: [0])
    out: Optional[str] = None

    def __post_init__(self):
        self.validate()

    @property
    def resolved_family(self) -> str:
        if self.family is not None:
            return self.family
        return CHOLESKY if self.model == "logreg" else DIAG

    @property
    def resolved_M(self) -> int:
        if self.M is not None:
            return self.M
        return 200 if (self.model == "logreg" and self.resolved_family == CHOLESKY) else 400

    def validate(self) -> None:
        def fail(msg):
            raise ConfigError(msg)

        if self.model not in MODEL_KINDS:
            fail(f"model.kind must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.family is not None and self.family not in (DIAG, CHOLESKY):
            fail("family must be 'diag' or 'chol'")
        if not isinstance(self.data, dict) or (("synth" in self.data) == ("path" in self.data)):
            fail("data needs exactly one of 'synth' or 'path'")
        if not self.learning_rates or any(not (isinstance(r, (int, float)) and r > 0) for r in self.learning_rates):
            fail("learning rates must be positive numbers")
        if not 0 <= self.momentum < 1:
            fail("momentum must lie in [0, 1)")
        if not self.time_budget > 0:
            fail("time_budget must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            fail("max_steps must be at least 1")
        if self.batch_size < 1 or self.warm_start_steps < 0 or not self.warm_start_rate >= 0:
            fail("batch_size >= 1, warm_start_steps >= 0 and warm_start_rate >= 0 are required")
        if self.mode not in MODES:
            fail(f"selection.mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "pool":
            bad = [m for m in self.members if m not in POOL_MEMBERS]
            if bad or not self.members:
                fail(f"pool members must be a non-empty subset of {POOL_MEMBERS}")
        if self.control_variates is not None:
            bad = [c for c in self.control_variates if c not in CONTROL_VARIATES]
            if bad:
                fail(f"unknown control variates {bad}")
        for c in self.support:
            if c not in (self.control_variates or CONTROL_VARIATES):
                fail(f"fixed support entry {c!r} is not a configured control variate")
        if self.M is not None and self.M < 1:
            fail("M must be at least 1")
        if any(not 0 <= f < 1 for f in self.fractions) or list(self.fractions) != sorted(self.fractions):
            fail("fractions must be sorted values in [0, 1)")
        if self.profile_warmup < 1 or self.profile_reps < 3:
            fail("profile_warmup >= 1 and profile_reps >= 3 are required")
        if self.record_every < 1 or self.eval_samples < 1 or self.workers < 1:
            fail("record_every, eval_samples and workers must be positive")
        if not self.seeds:
            fail("seeds must be non-empty")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        known = {"model", "data", "family", "optimizer", "selection", "record_every",
                 "eval_samples", "eval_seed", "seeds", "out"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = raw.get("model") or {}
        if isinstance(model, str):
            model = {"kind": model}
        opt = dict(raw.get("optimizer") or {})
        sel = dict(raw.get("selection") or {})
        kwargs = {"model": model.get("kind"), "hyper": dict(model.get("hyper") or {}),
                  "data": raw.get("data"), "family": raw.get("family")}
        grid = opt.pop("learning_rate_grid", None)
        rate = opt.pop("learning_rate", None)
        if grid is not None:
            try:
                kwargs["learning_rates"] = [float(x) for x in np.geomspace(
                    float(grid["low"]), float(grid["high"]), int(grid["count"]))]
            except (KeyError, TypeError, ValueError):
                raise ConfigError("learning_rate_grid needs numeric low, high, count") from None
        elif rate is not None:
            kwargs["learning_rates"] = [float(r) for r in (rate if isinstance(rate, list) else [rate])]
        opt_keys = {"momentum", "time_budget", "max_steps", "batch_size", "warm_start_steps",
                    "warm_start_rate", "init_log_scale"}
        sel_keys = {"mode", "members", "control_variates", "support", "M", "fractions",
                    "profile_warmup", "profile_reps", "workers"}
        for section, keys, name in ((opt, opt_keys, "optimizer"), (sel, sel_keys, "selection")):
            extra = set(section) - keys
            if extra:
                raise ConfigError(f"unknown {name} keys: {sorted(extra)}")
            kwargs.update(section)
        for key in ("record_every", "eval_samples", "eval_seed", "seeds", "out"):
            if key in raw:
                kwargs[key] = raw[key]
        if isinstance(kwargs.get("seeds"), int):
            kwargs["seeds"] = [kwargs["seeds"]]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        return cls.from_dict(raw)


def load_dataset(source: dict):
    if "synth" in source:
        synth = dict(source["synth"])
        kind = synth.pop("kind", None)
        size = synth.pop("size", 100)
        seed = synth.pop("seed", 0)
        dataset = data_mod.synth_dataset(kind, int(size), int(seed), **synth)
    else:
        fmt = source.get("format", "libsvm" if str(source["path"]).endswith((".svm", ".libsvm", ".txt")) else "table")
        if fmt == "libsvm":
            dataset = data_mod.load_libsvm(source["path"])
        elif fmt == "table":
            dataset = data_mod.load_table(source["path"], source.get("target"))
        else:
            raise ConfigError(f"unknown data format {fmt!r}")
    rows = source.get("max_rows")
    if rows is not None and hasattr(dataset, "head"):
        dataset = dataset.head(int(rows))
    return dataset


@dataclass
class Problem:
    """A model together with the estimators used to fit it."""

    model: ModelSpec
    family: str
    suite: object


def build_problem(config: ExperimentConfig) -> Problem:
    """Resolve the dataset, model and control variates; every check happens before compute."""
    try:
        dataset = load_dataset(config.data)
        model = make_model(config.model, dataset, **config.hyper)
    except ConfigError:
        raise
    except (G2TError, OSError, TypeError, KeyError) as exc:
        raise ConfigError(f"cannot build model: {exc}") from None
    labels = config.control_variates
    if labels is None:
        labels = EstimatorSuite.available(model)
    try:
        suite = EstimatorSuite(model, labels)
    except UnavailableControlVariate as exc:
        raise ConfigError(str(exc)) from None
    for c in config.support:
        if c not in suite.labels:
            raise ConfigError(f"fixed support entry {c!r} is not available for model {model.name!r}")
    return Problem(model, config.resolved_family, suite)


class RunClock:
    """Wall clock that can be paused while measurements are taken."""

    def __init__(self, clock=time.perf_counter):
        self._clock = clock
        self._start = clock()
        self._paused = 0.0
        self._pause_start = None

    def elapsed(self) -> float:
        now = self._pause_start if self._pause_start is not None else self._clock()
        return now - self._start - self._paused

    def pause(self):
        self._pause_start = self._clock()

    def resume(self):
        self._paused += self._clock() - self._pause_start
        self._pause_start = None


@dataclass
class SeedResult:
    seed: int
    learning_rate: float
    records: List[data_mod.TraceRecord]
    decisions: List[dict]
    profile: Optional[dict]
    diverged: bool = False


class _Selector:
    """Holds the current estimator and re-selects it on request."""

    def __init__(self, problem: Problem, config: ExperimentConfig):
        self.problem = problem
        self.config = config
        self.suite = problem.suite
        self.J = self.suite.J
        self.weights = np.zeros(self.J)
        self.profile: Optional[CostProfile] = None
        self.pool = None
        self.member = 0
        self.g2hat = math.nan
        self.that = math.nan
        if config.mode == "pool":
            self.label = f"pool:{config.members[0]}"
        else:
            self.label = "cv:" + "0" * self.J

    def gradient(self, params, xi) -> np.ndarray:
        if self.config.mode == "pool":
            return np.asarray(self.pool[self.member].evaluator(params, xi)).mean(axis=0)
        return self.suite.gradient(params, xi, self.weights)

    def profile_costs(self, params, rng) -> dict:
        """Time whole optimizer steps; each estimator is costed as the step that uses it."""
        cfg = self.config
        if cfg.mode == "pool":
            evaluators = self.suite.pool()
            self.pool = []
            for name in cfg.members:
                fn = evaluators[name]
                grad = lambda p, xi, fn=fn: np.asarray(fn(p, xi)).mean(axis=0)  # noqa: E731
                cost = profile_cost(step_probe(params, grad, cfg, rng), cfg.profile_warmup, cfg.profile_reps)
                self.pool.append(PoolMember(name, fn, max(cost, 1e-9)))
            return {"members": {m.label: m.cost for m in self.pool},
                    "warmup": cfg.profile_warmup, "reps": cfg.profile_reps}

        def probe(weights):
            return step_probe(params, lambda p, xi: self.suite.gradient(p, xi, weights), cfg, rng)

        combined = [probe(np.eye(self.J)[i]) for i in range(self.J)]
        self.profile = profile_cv_costs(probe(np.zeros(self.J)), combined, cfg.profile_warmup,
                                        cfg.profile_reps, combined=True, block=PROFILE_BLOCK)
        self.that = self.profile.t0
        return {"t0": self.profile.t0, "t": self.profile.t.tolist(), "labels": list(self.suite.labels),
                "warmup": cfg.profile_warmup, "reps": cfg.profile_reps}

    def select(self, params, seed) -> dict:
        cfg = self.config
        if cfg.mode == "pool":
            choice = select_from_pool(self.pool, params, cfg.resolved_M, seed, workers=cfg.workers)
            self.member = choice.index
            self.label = f"pool:{choice.label}"
            self.g2hat, self.that = choice.g2hat, choice.that
            return {"selection": self.label, "g2hat": choice.g2hat, "that": choice.that,
                    "scores": dict(zip(cfg.members, choice.scores.tolist()))}
        base, cvs = self.suite.stat_evaluators(params)
        stats = collect_quadratic_stats(params, base, cvs, cfg.resolved_M, seed, workers=cfg.workers)
        if cfg.mode == "cv-auto":
            decision = solve_support_enumeration(stats, self.profile)
        else:
            support = tuple(self.suite.labels.index(c) for c in cfg.support)
            decision = fixed_support_decision(stats, self.profile, support)
        self.apply(decision)
        return {"selection": self.label, "g2hat": decision.g2hat, "that": decision.that,
                "weights": decision.weights.tolist(), "score": decision.score}

    def apply(self, decision: SelectionDecision) -> None:
        self.weights = decision.weights
        self.label = "cv:" + decision.bitmask(self.J)
        self.g2hat, self.that = decision.g2hat, decision.that


def initial_params(problem: Problem, config: ExperimentConfig) -> VariationalParams:
    return VariationalParams.standard(problem.model.dim, problem.family, config.init_log_scale)


def warm_start(problem: Problem, config: ExperimentConfig, params, rng) -> VariationalParams:
    """Plain SGD with the base estimator at the fixed warm-start rate."""
    zeros = np.zeros(problem.suite.J)
    for _ in range(config.warm_start_steps):
        xi = rng.standard_normal((config.batch_size, params.dim))
        params = params.with_flat(params.flat + config.warm_start_rate * problem.suite.gradient(params, xi, zeros))
    return params


def _usable(params: VariationalParams) -> bool:
    return bool(np.all(np.isfinite(params.flat)) and np.all(np.isfinite(params.scale_diag))
                and np.all(params.scale_diag > 0))


def momentum_step(params, velocity, grad, xi, config: ExperimentConfig, learning_rate: float):
    """One ascent step; returns the new parameters, velocity and whether they are usable."""
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            velocity = config.momentum * velocity + grad(params, xi)
            params = params.with_flat(params.flat + learning_rate * velocity)
            return params, velocity, _usable(params)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError):
            return params, velocity, False


def step_probe(params, grad, config: ExperimentConfig, rng):
    """A callable doing the work of one optimizer step at ``params`` without advancing it.

    A zero learning rate keeps the values fixed, but each call still works on
    the parameter object the previous step produced, so cached factorizations
    are rebuilt once per step, as in the real loop.
    """
    velocity = np.zeros(params.size)
    state = [params]

    def run():
        xi = rng.standard_normal((config.batch_size, params.dim))
        state[0] = momentum_step(state[0], velocity, grad, xi, config, 0.0)[0]

    return run


def _selection_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 0x5E1EC7, k + 1])


def run_seed(problem: Problem, config: ExperimentConfig, seed: int, learning_rate: float) -> SeedResult:
    """One optimization run: warm start, profile, then momentum SGD under the time budget."""
    rng = np.random.default_rng(seed)
    params = warm_start(problem, config, initial_params(problem, config), rng)
    selector = _Selector(problem, config)
    model = problem.model
    clock = RunClock()
    records: List[data_mod.TraceRecord] = []
    decisions: List[dict] = []

    def record(step):
        clock.pause()
        elbo = elbo_estimate(params, model, config.eval_samples, config.eval_seed)
        records.append(data_mod.TraceRecord(
            clock.elapsed(), step, float(elbo), selector.label,
            float(selector.g2hat), float(selector.that), seed))
        clock.resume()

    profile = None
    if config.mode != "base":
        profile = selector.profile_costs(params, np.random.default_rng(_selection_seed(seed, -1)))
    triggers = reselection_schedule(config.time_budget, config.fractions) if config.mode != "base" else []
    record(0)
    velocity = np.zeros(params.size)
    step = 0
    next_trigger = 0
    diverged = False
    while True:
        now = clock.elapsed()
        if next_trigger < len(triggers) and now >= triggers[next_trigger]:
            while next_trigger < len(triggers) and now >= triggers[next_trigger]:
                next_trigger += 1
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    info = selector.select(params, _selection_seed(seed, len(decisions)))
            except (DomainError, ArithmeticError, np.linalg.LinAlgError) as exc:
                # overflowing statistics mean the iterate has already blown up
                diverged = True
                log.warning("seed %d, rate %g: selection failed at step %d: %s", seed, learning_rate, step, exc)
                break
            done = clock.elapsed()
            info.update(time=done, step=step, seconds=done - now)
            decisions.append(info)
            record(step)
            continue
        if now >= config.time_budget or (config.max_steps is not None and step >= config.max_steps):
            break
        xi = rng.standard_normal((config.batch_size, params.dim))
        params, velocity, ok = momentum_step(params, velocity, selector.gradient, xi, config, learning_rate)
        step += 1
        if not ok:
            diverged = True
            log.warning("seed %d, rate %g: parameters diverged at step %d", seed, learning_rate, step)
            break
        if step % config.record_every == 0:
            record(step)
    if records[-1].step != step or diverged:
        if diverged:
            records.append(data_mod.TraceRecord(clock.elapsed(), step, float("nan"), selector.label,
                                                float(selector.g2hat), float(selector.that), seed))
        else:
            record(step)
    return SeedResult(seed, learning_rate, records, decisions, profile, diverged)


def summarize(records_by_seed: Dict[int, Sequence[data_mod.TraceRecord]]) -> dict:
    """Summary of one learning rate, computed only from trace records."""
    per_seed = {}
    for seed, records in records_by_seed.items():
        records = list(records)
        history = []
        last = None
        for rec in records:
            # NaN-aware key, so parsed traces fold the same as in-memory records
            key = (rec.selection, _nan_key(rec.g2hat), _nan_key(rec.that))
            if key != last and not (last is None and math.isnan(rec.g2hat)):
                history.append({"time": rec.wall_seconds, "step": rec.step, "selection": rec.selection,
                                "g2hat": rec.g2hat, "that": rec.that})
            last = key
        per_seed[str(seed)] = {
            "final_elbo": records[-1].elbo,
            "total_steps": records[-1].step,
            "wall_seconds": records[-1].wall_seconds,
            "selection_history": history,
        }
    finals = [v["final_elbo"] for v in per_seed.values()]
    return {
        "seeds": per_seed,
        "mean_final_elbo": float(np.mean(finals)),
        "total_steps": int(sum(v["total_steps"] for v in per_seed.values())),
        "wall_seconds": float(sum(v["wall_seconds"] for v in per_seed.values())),
    }


def _nan_key(x: float):
    return "nan" if math.isnan(x) else x


def trace_name(rate_index: int, seed: int) -> str:
    return f"trace_lr{rate_index}_seed{seed}.csv"


def run_experiment(config: ExperimentConfig, out_dir=None, problem: Optional[Problem] = None) -> dict:
    """Run every (learning rate, seed) pair; write traces and ``summary.json`` if ``out_dir`` is set."""
    problem = problem or build_problem(config)
    out = Path(out_dir) if out_dir is not None else (Path(config.out) if config.out else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runs = []
    for ri, rate in enumerate(config.learning_rates):
        by_seed = {}
        profiles = {}
        decisions = {}
        for seed in config.seeds:
            result = run_seed(problem, config, seed, rate)
            by_seed[seed] = result.records
            profiles[str(seed)] = result.profile
            decisions[str(seed)] = result.decisions
            if out is not None:
                data_mod.write_trace(out / trace_name(ri, seed), result.records)
        summary = summarize(by_seed)
        summary.update(learning_rate=rate, trace_files=[trace_name(ri, s) for s in config.seeds])
        runs.append({"summary": summary, "profiles": profiles, "decisions": decisions, "records": by_seed})
    report = {
        "model": problem.model.name,
        "family": problem.family,
        "mode": config.mode,
        "control_variates": list(problem.suite.labels),
        "runs": [r["summary"] for r in runs],
        "profiles": [r["profiles"] for r in runs],
        "decisions": [r["decisions"] for r in runs],
    }
    if out is not None:
        (out / "summary.json").write_text(json.dumps(report, indent=2, default=_json_default))
    report["records"] = [r["records"] for r in runs]
    return report


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _warm_params(problem: Problem, config: ExperimentConfig):
    seed = config.seeds[0]
    rng = np.random.default_rng(seed)
    return seed, warm_start(problem, config, initial_params(problem, config), rng)


def run_profile(config: ExperimentConfig, problem: Optional[Problem] = None) -> dict:
    """Cost profile at the warm-started parameters of the first seed."""
    problem = problem or build_problem(config)
    seed, params = _warm_params(problem, config)
    selector = _Selector(problem, config)
    rng = np.random.default_rng(_selection_seed(seed, -1))
    if config.mode == "base":
        probe = step_probe(params, problem.suite.gradient, config, rng)
        t0 = profile_cost(probe, config.profile_warmup, config.profile_reps)
        return {"t0": t0, "t": [], "labels": [], "warmup": config.profile_warmup, "reps": config.profile_reps}
    return selector.profile_costs(params, rng)


def run_select(config: ExperimentConfig, problem: Optional[Problem] = None) -> dict:
    """One selection at the warm-started parameters of the first seed."""
    problem = problem or build_problem(config)
    if config.mode == "base":
        raise ConfigError("selection mode 'base' has nothing to select")
    seed, params = _warm_params(problem, config)
    selector = _Selector(problem, config)
    profile = selector.profile_costs(params, np.random.default_rng(_selection_seed(seed, -1)))
    info = selector.select(params, _selection_seed(seed, 0))
    info["profile"] = profile
    return info


def run_export(config: ExperimentConfig, problem: Optional[Problem] = None) -> str:
    """MIQCP text for the selection problem at the warm-started parameters."""
    problem = problem or build_problem(config)
    seed, params = _warm_params(problem, config)
    cfg = config
    if cfg.mode not in ("cv-auto", "cv-fixed"):
        cfg = ExperimentConfig(**{**config.__dict__, "mode": "cv-auto"})
    selector = _Selector(problem, cfg)
    selector.profile_costs(params, np.random.default_rng(_selection_seed(seed, -1)))
    base, cvs = problem.suite.stat_evaluators(params)
    stats = collect_quadratic_stats(params, base, cvs, cfg.resolved_M, _selection_seed(seed, 0), workers=cfg.workers)
    return export_miqcp(stats, selector.profile)
