"""Adaptive gradient-estimator selection by the G^2 T rule."""

from .bounds import BoundQuery, EstimatorProfile, ObjectiveClass, Row, optimal_step_size, rank_by_g2t, theta
from .errors import AssumptionError, ConfigError, DomainError, G2TError, IngestionError, UnavailableControlVariate
from .estimators import EstimatorSuite, base_rep, cv_c1, cv_c2, cv_c3, stl
from .selection import (
    CostProfile,
    SelectionDecision,
    SquaredNormStats,
    g2_of_weights,
    select_from_pool,
    solve_support_enumeration,
    time_of_support,
)
from .variational import VariationalParams

__all__ = [
    "AssumptionError", "BoundQuery", "ConfigError", "CostProfile", "DomainError", "EstimatorProfile",
    "EstimatorSuite", "G2TError", "IngestionError", "ObjectiveClass", "Row", "SelectionDecision",
    "SquaredNormStats", "UnavailableControlVariate", "VariationalParams", "base_rep", "cv_c1", "cv_c2",
    "cv_c3", "g2_of_weights", "optimal_step_size", "rank_by_g2t", "select_from_pool",
    "solve_support_enumeration", "stl", "theta", "time_of_support",
]

__version__ = "0.1.0"
