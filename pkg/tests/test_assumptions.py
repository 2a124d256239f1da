import math

import pytest

from circlab.assumptions import (
    CONDITIONS,
    HORIZON_LABEL,
    AssumptionVerdict,
    Failure,
    check_dynamical_assumptions,
    checker_profile,
    sweep_parameters,
)
from circlab.map_core import CircleMap, ExperimentProfile, eval_map

L = 200.0


def checker(L: float = L) -> ExperimentProfile:
    return checker_profile(ExperimentProfile.practical(L), sigma=0.05)


def test_checker_profile_ties_alpha_to_delta() -> None:
    p = checker()
    assert p.sigma == 0.05
    assert L ** (-p.alpha * p.N0) == pytest.approx(p.delta)
    paper = ExperimentProfile.paper(L, 10)
    assert checker_profile(paper) is paper


def test_verdict_consistency_is_enforced() -> None:
    with pytest.raises(ValueError):
        AssumptionVerdict(True, Failure("G1", 0.25, 3), 100)
    with pytest.raises(ValueError):
        AssumptionVerdict(False, None, 100)
    assert AssumptionVerdict(True, None, 100).label == HORIZON_LABEL


def test_default_sigma_is_infeasible_at_desk_scale() -> None:
    # no point is L^(-1/6) away from both 0 and 1/2 when L = 200
    m = CircleMap(a=0.3, L=L)
    verdict = check_dynamical_assumptions(m, ExperimentProfile.practical(L), 50)
    assert not verdict.passed
    assert verdict.first_failure.condition == "a"
    assert verdict.first_failure.time == 0


def test_critical_value_near_critical_point_fails_at_start() -> None:
    m = CircleMap(a=0.0, L=L)
    p = checker()
    c, other = m.critical.points
    F0 = float(eval_map(m, c, lift=True))
    a = (other + p.sigma / 4.0 - F0) % 1.0
    verdict = check_dynamical_assumptions(m.with_a(a), p, 100)
    assert not verdict.passed
    assert verdict.first_failure == Failure("a", c, 0)
    assert verdict.horizon == 100


def test_horizon_below_n0_is_rejected() -> None:
    p = checker()
    with pytest.raises(ValueError):
        check_dynamical_assumptions(CircleMap(a=0.3, L=L), p, p.N0 - 1)


def test_horizon_n0_checks_only_the_start() -> None:
    p = checker()
    m = CircleMap(a=0.0, L=L)
    for k in range(50):
        v = check_dynamical_assumptions(m.with_a(k / 50), p, p.N0)
        if not v.passed:
            assert v.first_failure.condition in ("a", "proximity")
            assert v.first_failure.time <= p.N0 + 1


def test_failure_times_stay_within_horizon() -> None:
    p = checker()
    m = CircleMap(a=0.0, L=L)
    for k in range(20):
        v = check_dynamical_assumptions(m.with_a(k / 20), p, 200)
        if not v.passed:
            assert 0 <= v.first_failure.time <= 201
            assert v.first_failure.critical_point in m.critical.points


def test_sweep_accounting() -> None:
    res = sweep_parameters(CircleMap(a=0.0, L=L), 100, [L, 1e4], checker, 50)
    assert res.a_values == tuple(k / 100 for k in range(100))
    assert res.label == HORIZON_LABEL
    assert [r.L for r in res.rows] == [L, 1e4]
    for row in res.rows:
        assert 0.0 <= row.fraction <= 1.0
        assert row.total == 100
        assert set(row.histogram) == set(CONDITIONS)
        assert sum(row.histogram.values()) == row.total - row.accepted
        assert len(res.verdicts[row.L]) == 100
        assert sum(v.passed for v in res.verdicts[row.L]) == row.accepted
    assert res.table() == [(r.L, r.fraction) for r in res.rows]


def test_sweep_grid_minimum() -> None:
    with pytest.raises(ValueError):
        sweep_parameters(CircleMap(a=0.0, L=L), 99, [L], checker(), 50)


def test_sweep_accepts_a_fixed_profile() -> None:
    res = sweep_parameters(CircleMap(a=0.0, L=L), 100, [L], ExperimentProfile.practical(L), 20)
    # the default practical sigma rejects everything at the first point
    assert res.rows[0].accepted == 0
    assert res.rows[0].histogram["a"] == 100
    assert math.isclose(res.rows[0].fraction, 0.0)
