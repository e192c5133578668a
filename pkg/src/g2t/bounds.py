"""Closed-form SGD convergence guarantees and the G^2 T ranking rule.

Every guarantee has the form ``alpha(lambda, L, C) * (G^2 / K) ** p`` with
``p = 1`` for the strongly convex rows and ``p = 1/2`` otherwise.  Swapping
``K`` for ``T_opt / T(g)`` shows that, for a fixed time budget, the estimator
with the smallest ``G^2 * T`` gets the best guarantee on every row.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import AssumptionError, DomainError


class Row(enum.Enum):
    SC_SMOOTH = "sc+smooth"
    SC = "sc"
    CONVEX = "convex"
    SMOOTH = "smooth"
    MOMENTUM = "momentum"
    NESTEROV = "nesterov"

    @classmethod
    def parse(cls, text: str) -> "Row":
        key = text.strip().lower().replace("_", "+")
        for row in cls:
            if row.value == key:
                return row
        raise DomainError(f"unknown bound row {text!r}")


@dataclass(frozen=True)
class ObjectiveClass:
    """Structural assumptions on the objective.

    ``smooth_L=None`` means no smoothness constant is known.
    """

    lam: float = 0.0
    smooth_L: Optional[float] = None
    convex: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise DomainError("strong-convexity modulus must be >= 0")
        if self.lam > 0 and not self.convex:
            raise DomainError("a strongly convex objective is convex")
        if self.smooth_L is not None and not self.smooth_L > 0:
            raise DomainError("smoothness constant must be positive")


@dataclass(frozen=True)
class BoundQuery:
    objective: ObjectiveClass
    K: int
    g2: float
    beta: float = 0.0
    df: float = 0.0
    dw: float = 0.0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise DomainError("K must be a positive integer")
        if not self.g2 >= 0:
            raise DomainError("g2 must be >= 0")
        if not 0 <= self.beta < 1:
            raise DomainError("beta must lie in [0, 1)")
        if not (self.df >= 0 and self.dw >= 0):
            raise DomainError("df and dw must be >= 0")


@dataclass(frozen=True)
class EstimatorProfile:
    g2: float
    t: float
    label: str = ""

    def __post_init__(self):
        if not self.g2 >= 0:
            raise DomainError("g2 must be >= 0")
        if not self.t > 0:
            raise DomainError("cost must be > 0")

    @property
    def score(self) -> float:
        return self.g2 * self.t


@dataclass(frozen=True)
class StepSchedule:
    """Either ``eta_k = 1 / (lam * k)`` (``decaying``) or a constant ``value``."""

    kind: str
    value: float = 0.0
    lam: float = 0.0

    def __call__(self, k: int) -> float:
        if self.kind == "decaying":
            if k < 1:
                raise DomainError("step index starts at 1")
            return 1.0 / (self.lam * k)
        return self.value

    def describe(self) -> str:
        if self.kind == "decaying":
            return f"1/({self.lam:g}*k)"
        return f"{self.value:.6g}"


def _require(query: BoundQuery, row: Row) -> None:
    obj = query.objective
    if row in (Row.SC_SMOOTH, Row.SC) and obj.lam <= 0:
        raise AssumptionError(f"row {row.value} needs a strongly convex objective (lambda > 0)")
    if row is Row.CONVEX and not obj.convex:
        raise AssumptionError("row convex needs a convex objective")
    if row in (Row.SC_SMOOTH, Row.SMOOTH, Row.MOMENTUM, Row.NESTEROV) and obj.smooth_L is None:
        raise AssumptionError(f"row {row.value} needs a finite smoothness constant")


def _beta_factor(row: Row, beta: float) -> float:
    lead = beta ** 2 if row is Row.MOMENTUM else beta ** 4
    return lead + (1.0 - beta) ** 2


def exponent(row: Row) -> float:
    return 1.0 if row in (Row.SC_SMOOTH, Row.SC) else 0.5


def alpha(query: BoundQuery, row: Row) -> float:
    """The estimator-independent factor of the guarantee."""
    _require(query, row)
    obj = query.objective
    if row is Row.SC_SMOOTH:
        return 2.0 * obj.smooth_L / obj.lam ** 2
    if row is Row.SC:
        return 4.0 / obj.lam ** 2
    if row is Row.CONVEX:
        return query.dw
    if row is Row.SMOOTH:
        return math.sqrt(obj.smooth_L * query.df)
    b = query.beta
    return math.sqrt(8.0 * query.df * obj.smooth_L * _beta_factor(row, b) / (1.0 - b) ** 2)


def theta(query: BoundQuery, row: Row) -> float:
    """Right-hand side of the convergence guarantee for ``row``."""
    a = alpha(query, row)
    ratio = query.g2 / query.K
    if exponent(row) == 1.0:
        return a * ratio
    return a * math.sqrt(query.g2) / math.sqrt(query.K)


def optimal_step_size(query: BoundQuery, row: Row) -> StepSchedule:
    _require(query, row)
    obj = query.objective
    if row in (Row.SC_SMOOTH, Row.SC):
        return StepSchedule("decaying", lam=obj.lam)
    if query.g2 == 0:
        raise DomainError("optimal constant step is undefined for g2 = 0")
    K, G = query.K, math.sqrt(query.g2)
    if row is Row.CONVEX:
        return StepSchedule("constant", query.dw / (G * math.sqrt(K)))
    if row is Row.SMOOTH:
        return StepSchedule("constant", math.sqrt(2.0 * query.df / (obj.smooth_L * K * query.g2)))
    b = query.beta
    num = 2.0 * query.df * (1.0 - b) ** 4
    return StepSchedule("constant", math.sqrt(num / (_beta_factor(row, b) * K * obj.smooth_L * query.g2)))


def iterations_for_budget(t_opt: float, cost: float) -> int:
    """``K = floor(T_opt / T)``, at least one step."""
    if not (t_opt > 0 and cost > 0):
        raise DomainError("budget and cost must be positive")
    return max(1, math.floor(t_opt / cost))


def theta_for_budget(objective: ObjectiveClass, row: Row, t_opt: float, profile: EstimatorProfile,
                     beta: float = 0.0, df: float = 0.0, dw: float = 0.0) -> float:
    K = iterations_for_budget(t_opt, profile.t)
    return theta(BoundQuery(objective, K, profile.g2, beta, df, dw), row)


def rank_by_g2t(pool: Sequence[EstimatorProfile]) -> list:
    """Indices of ``pool`` sorted by ``g2 * t``; ties keep pool order."""
    if not pool:
        raise DomainError("empty estimator pool")
    return sorted(range(len(pool)), key=lambda i: pool[i].score)
