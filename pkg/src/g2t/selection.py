"""Gradient estimator selection by minimum estimated ``G^2 * T``.

Two selectors are provided:

* :func:`select_from_pool` picks from a finite list of estimators.
* :func:`solve_support_enumeration` picks control-variate weights ``a`` for
  ``g_a = g_base + C a``.  The cost only depends on the support of ``a`` and
  the squared norm is a quadratic in ``a``, so the exact minimizer is found by
  enumerating the ``2^J`` supports and solving a ridge-stabilized linear
  system on each.

Supports are tuples of 0-based control-variate indices.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import DomainError

CHUNK = 64
MAX_ENUMERATION_J = 20
DEFAULT_FRACTIONS = (0.0, 0.1, 0.5)


@dataclass(frozen=True, eq=False)
class CostProfile:
    """Seconds per base evaluation and marginal seconds per control variate."""

    t0: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        t = np.maximum(np.asarray(self.t, dtype=float).ravel(), 0.0)
        if not self.t0 > 0:
            raise DomainError("base cost t0 must be positive")
        if not np.all(np.isfinite(t)):
            raise DomainError("control-variate costs must be finite")
        object.__setattr__(self, "t", t)

    @property
    def J(self) -> int:
        return self.t.size

    def scaled(self, c: float) -> "CostProfile":
        return CostProfile(self.t0 * c, self.t * c)


@dataclass(frozen=True, eq=False)
class SquaredNormStats:
    """``G2(a) = u + r.a + a^T Q a / 2`` over ``M`` shared samples."""

    u: float
    r: np.ndarray
    Q: np.ndarray
    M: int

    @property
    def J(self) -> int:
        return np.asarray(self.r).size

    def check_finite(self) -> None:
        if not (math.isfinite(self.u) and np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.Q))):
            raise DomainError("squared-norm statistics contain non-finite entries")


@dataclass(frozen=True, eq=False)
class SelectionDecision:
    support: tuple
    weights: np.ndarray
    g2hat: float
    that: float

    @property
    def score(self) -> float:
        return self.g2hat * self.that

    def bitmask(self, J: Optional[int] = None) -> str:
        J = self.weights.size if J is None else J
        return "".join("1" if i in self.support else "0" for i in range(J))

    def label(self) -> str:
        return "cv:" + self.bitmask()


@dataclass
class PoolMember:
    label: str
    evaluator: Callable
    cost: float

    def __post_init__(self):
        if not self.cost > 0:
            raise DomainError(f"pool member {self.label!r} needs a positive cost")


@dataclass(frozen=True, eq=False)
class PoolSelection:
    index: int
    label: str
    g2hats: np.ndarray
    costs: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        return self.g2hats * self.costs

    @property
    def g2hat(self) -> float:
        return float(self.g2hats[self.index])

    @property
    def that(self) -> float:
        return float(self.costs[self.index])


# -- timing -----------------------------------------------------------------

def profile_cost(evaluable: Callable[[], object], warmup: int = 2, reps: int = 7,
                 clock: Callable[[], float] = time.perf_counter) -> float:
    """Median wall-clock seconds of ``reps`` calls after ``warmup`` discarded calls."""
    if warmup < 1 or reps < 3:
        raise DomainError("profile_cost needs warmup >= 1 and reps >= 3")
    for _ in range(warmup):
        evaluable()
    durations = []
    for _ in range(reps):
        start = clock()
        evaluable()
        durations.append(clock() - start)
    return float(np.median(durations))


def profile_cv_costs(base: Callable[[], object], cvs: Sequence[Callable[[], object]],
                     warmup: int = 2, reps: int = 7, clock: Callable[[], float] = time.perf_counter,
                     combined: bool = False, block: int = 1) -> CostProfile:
    """Base cost ``t0`` and marginal control-variate costs ``t_i``.

    ``t_i = max(0, cost(base + c_i) - t0)``.  With ``combined=True`` each entry
    of ``cvs`` already evaluates the base as well; otherwise the two are
    called back to back.  Timings are interleaved rep by rep so that slow
    drifts of machine speed hit every estimator alike; each rep times
    ``block`` consecutive calls, as in a running optimizer loop.
    """
    if warmup < 1 or reps < 3 or block < 1:
        raise DomainError("profile_cv_costs needs warmup >= 1, reps >= 3 and block >= 1")
    evaluables = [base]
    for cv in cvs:
        if combined:
            evaluables.append(cv)
        else:
            def both(cv=cv):
                base()
                cv()
            evaluables.append(both)
    for fn in evaluables:
        for _ in range(warmup):
            fn()
    durations = np.empty((reps, len(evaluables)))
    for r in range(reps):
        for k, fn in enumerate(evaluables):
            start = clock()
            for _ in range(block):
                fn()
            durations[r, k] = (clock() - start) / block
    medians = np.median(durations, axis=0)
    t0 = float(medians[0])
    return CostProfile(t0, np.maximum(0.0, medians[1:] - t0))


def time_of_support(profile: CostProfile, support) -> float:
    total = profile.t0
    for i in support:
        if not 0 <= i < profile.J:
            raise DomainError(f"control variate index {i} out of range for J={profile.J}")
        total += profile.t[i]
    return float(total)


def reselection_schedule(budget: float, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> List[float]:
    """Run-clock times (seconds) at which the estimator is re-selected."""
    fractions = list(fractions)
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise DomainError("reselection fractions must lie in [0, 1)")
    if fractions != sorted(fractions):
        raise DomainError("reselection fractions must be sorted")
    return [f * budget for f in fractions]


# -- sampling ---------------------------------------------------------------

def _xi_shape(params, xi_shape):
    if xi_shape is not None:
        return tuple(np.atleast_1d(xi_shape))
    if hasattr(params, "dim"):
        return (params.dim,)
    return (np.asarray(params).size,)


def draw_xi(seed, M: int, shape) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((M, *shape))


def evaluate_samples(evaluator: Callable, params, xis: np.ndarray, workers: int = 1) -> np.ndarray:
    """Evaluate ``evaluator`` on every draw, returning one row per draw.

    Draws are cut into fixed-size chunks independent of ``workers`` and the
    rows are reassembled in draw order, so the output is bit-identical for
    any worker count.  Evaluators flagged ``batched`` receive a whole chunk.
    """
    batched = getattr(evaluator, "batched", False)

    def run(chunk):
        if batched:
            return np.asarray(evaluator(params, chunk), dtype=float).reshape(len(chunk), -1)
        return np.stack([np.asarray(evaluator(params, x), dtype=float).ravel() for x in chunk])

    chunks = [xis[i:i + CHUNK] for i in range(0, len(xis), CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def estimate_g2(evaluator: Callable, params, M: int, seed, xi_shape=None, workers: int = 1) -> float:
    """Mean squared norm of ``M`` seeded evaluations."""
    if M < 1:
        raise DomainError("M must be at least 1")
    xis = draw_xi(seed, M, _xi_shape(params, xi_shape))
    values = evaluate_samples(evaluator, params, xis, workers)
    return float(np.mean(np.sum(values ** 2, axis=1)))


def select_from_pool(pool: Sequence[PoolMember], params, M: int, seed, xi_shape=None,
                     workers: int = 1) -> PoolSelection:
    """Member minimizing ``G2hat * cost``; every member sees the same draws."""
    if not pool:
        raise DomainError("empty estimator pool")
    g2 = np.array([estimate_g2(m.evaluator, params, M, seed, xi_shape, workers) for m in pool])
    costs = np.array([m.cost for m in pool])
    scores = g2 * costs
    index = int(np.argmin(scores))  # first minimum on ties
    return PoolSelection(index, pool[index].label, g2, costs)


def quadratic_stats_from_samples(G: np.ndarray, C: np.ndarray) -> SquaredNormStats:
    """Statistics from base samples ``G`` (M x D) and controls ``C`` (M x D x J)."""
    G = np.asarray(G, dtype=float)
    C = np.asarray(C, dtype=float)
    M = G.shape[0]
    if C.shape[:2] != G.shape:
        raise DomainError("control samples must be M x D x J matching the base samples")
    u = float(np.mean(np.sum(G ** 2, axis=1)))
    r = 2.0 * np.einsum("md,mdj->j", G, C) / M
    Q = 2.0 * np.einsum("mdi,mdj->ij", C, C) / M
    return SquaredNormStats(u, r, 0.5 * (Q + Q.T), M)


def collect_samples(params, base: Callable, cvs: Sequence[Callable], M: int, seed, xi_shape=None,
                    workers: int = 1):
    xis = draw_xi(seed, M, _xi_shape(params, xi_shape))
    G = evaluate_samples(base, params, xis, workers)
    if cvs:
        C = np.stack([evaluate_samples(c, params, xis, workers) for c in cvs], axis=2)
    else:
        C = np.zeros(G.shape + (0,))
    return G, C


def collect_quadratic_stats(params, base: Callable, cvs: Sequence[Callable], M: int, seed,
                            xi_shape=None, workers: int = 1) -> SquaredNormStats:
    """``(u, r, Q)`` from ``M`` shared evaluations of the base and every control variate."""
    if M < 1:
        raise DomainError("M must be at least 1")
    return quadratic_stats_from_samples(*collect_samples(params, base, cvs, M, seed, xi_shape, workers))


def g2_of_weights(stats: SquaredNormStats, a) -> float:
    a = np.asarray(a, dtype=float).ravel()
    if a.size != stats.J:
        raise DomainError(f"expected {stats.J} weights, got {a.size}")
    r = np.asarray(stats.r, dtype=float)
    Q = np.asarray(stats.Q, dtype=float)
    return float(stats.u + r @ a + 0.5 * a @ Q @ a)


# -- exact weight selection -------------------------------------------------

def _ridge(stats: SquaredNormStats) -> float:
    J = max(stats.J, 1)
    return 1e-8 * max(1.0, float(np.trace(stats.Q)) / J)


def _solve_on_support(stats: SquaredNormStats, support, ridge: float):
    J = stats.J
    a = np.zeros(J)
    if support:
        idx = np.asarray(support)
        Q_ss = np.asarray(stats.Q, dtype=float)[np.ix_(idx, idx)] + ridge * np.eye(idx.size)
        rhs = -np.asarray(stats.r, dtype=float)[idx]
        try:
            a[idx] = np.linalg.solve(Q_ss, rhs)
        except np.linalg.LinAlgError:
            a[idx] = np.linalg.lstsq(Q_ss, rhs, rcond=None)[0]
    return a, max(0.0, g2_of_weights(stats, a))


def all_supports(J: int):
    """Every subset of ``range(J)``, smaller first, lexicographic within a size."""
    for k in range(J + 1):
        yield from itertools.combinations(range(J), k)


def solve_support_enumeration(stats: SquaredNormStats, profile: CostProfile) -> SelectionDecision:
    """Exact minimizer of ``G2hat(a) * That(a)`` over all ``a`` in R^J."""
    stats.check_finite()
    if not (math.isfinite(profile.t0) and np.all(np.isfinite(profile.t))):
        raise DomainError("cost profile contains non-finite entries")
    J = stats.J
    if profile.J != J:
        raise DomainError(f"cost profile has {profile.J} control variates, stats have {J}")
    if J > MAX_ENUMERATION_J:
        raise DomainError(f"support enumeration is limited to J <= {MAX_ENUMERATION_J}")
    ridge = _ridge(stats)
    best = None
    for support in all_supports(J):
        a, value = _solve_on_support(stats, support, ridge)
        cost = time_of_support(profile, support)
        if best is None or value * cost < best.score:
            best = SelectionDecision(support, a, value, cost)
    return best


def minimum_variance_weights(stats: SquaredNormStats, support) -> np.ndarray:
    """Weights minimizing ``G2hat`` with the support held fixed.

    A singular system is handled by the same ridge as the enumeration solver,
    so the ridge solution is returned rather than an error.
    """
    support = tuple(sorted(support))
    if not support:
        raise DomainError("support must be non-empty")
    if support[0] < 0 or support[-1] >= stats.J:
        raise DomainError("support index out of range")
    stats.check_finite()
    a, _ = _solve_on_support(stats, support, _ridge(stats))
    return a


def fixed_support_decision(stats: SquaredNormStats, profile: CostProfile, support) -> SelectionDecision:
    """Decision for a fixed control-variate subset (the empty subset is the base estimator)."""
    support = tuple(sorted(support))
    if support:
        a = minimum_variance_weights(stats, support)
    else:
        a = np.zeros(stats.J)
    return SelectionDecision(support, a, max(0.0, g2_of_weights(stats, a)), time_of_support(profile, support))
