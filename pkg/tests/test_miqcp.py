import numpy as np
import pytest

from g2t.errors import IngestionError
from g2t.miqcp import export_miqcp, parse_miqcp
from g2t.selection import CostProfile, quadratic_stats_from_samples, solve_support_enumeration


def _instance(seed, J=3):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((40, 5))
    C = rng.standard_normal((40, 5, J)) * 0.5
    C[:, :, 0] -= 0.8 * G  # make one control variate useful
    return quadratic_stats_from_samples(G, C), CostProfile(0.01, rng.uniform(0.0, 0.01, J))


def test_counts():
    stats, profile = _instance(0)
    problem = parse_miqcp(export_miqcp(stats, profile))
    assert len(problem.variables) == 8
    kinds = [k for _, k in problem.variables]
    assert kinds.count("binary") == 3 and kinds.count("continuous") == 5
    assert problem.n_quadratic == 1 and problem.n_linear == 1
    assert len(problem.indicators) == 3
    assert problem.objective_terms == ("V_G", "V_T")


def test_round_trip_exact():
    stats, profile = _instance(1)
    problem = parse_miqcp(export_miqcp(stats, profile))
    assert problem.u == stats.u
    np.testing.assert_array_equal(problem.r, stats.r)
    np.testing.assert_array_equal(problem.Q, stats.Q)
    assert problem.t0 == profile.t0
    np.testing.assert_array_equal(problem.t, profile.t)


@pytest.mark.parametrize("seed", range(10))
def test_enumerated_optimum_is_feasible(seed):
    stats, profile = _instance(seed)
    d = solve_support_enumeration(stats, profile)
    problem = parse_miqcp(export_miqcp(stats, profile))
    b = np.array([1 if i in d.support else 0 for i in range(3)])
    # V_G at the constraint boundary; clamping at zero never binds for a PSD form with u >= 0
    V_G = problem.quadratic_lhs(d.weights)
    assert problem.is_feasible(d.weights, b, V_G, d.that)
    assert problem.objective(d.weights, b, V_G, d.that) == pytest.approx(d.score, rel=1e-9)


def test_infeasible_points_are_reported():
    stats, profile = _instance(2)
    problem = parse_miqcp(export_miqcp(stats, profile))
    a = np.array([0.5, 0.0, 0.0])
    assert problem.violations(a, np.array([0, 0, 0]), 1e9, profile.t0)  # indicator broken
    assert problem.violations(a, np.array([1, 0, 0]), -1.0, profile.t0 + profile.t[0])  # V_G too small
    assert problem.violations(a, np.array([1, 0, 0]), 1e9, profile.t0)  # V_T wrong


def test_parse_errors():
    with pytest.raises(IngestionError):
        parse_miqcp("")
    with pytest.raises(IngestionError):
        parse_miqcp("MIQCP other 1\n")
    stats, profile = _instance(3)
    text = export_miqcp(stats, profile)
    with pytest.raises(IngestionError):
        parse_miqcp(text.replace("END\n", ""))
