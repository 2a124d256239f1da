import math

import numpy as np
import pytest

from circlab.common.errors import SingularProximity
from circlab.map_core import CircleMap, ExperimentProfile, eval_derivatives, eval_map
from circlab.orbit_engine import (
    PrecisionPolicy,
    advance,
    check_distortion,
    check_expansion_outside,
    compute_contraction,
    deep_return_expansion,
    iterate_orbit,
    log_derivative_many,
)


def canonical() -> CircleMap:
    return CircleMap(a=0.3, L=200.0)


def test_orbit_matches_stepwise_evaluation() -> None:
    m = canonical()
    orbit = iterate_orbit(m, 0.1234, 20)
    assert orbit.steps == 20
    assert not orbit.truncated
    assert set(orbit.flags) <= {"ok", "promoted"}
    x, total = 0.1234, 0.0
    # beyond a few steps the two evaluations separate chaotically
    for i in range(1, 4):
        fp, _ = eval_derivatives(m, x)
        total += math.log(abs(fp))
        x = eval_map(m, x)
        assert orbit.points[i] == pytest.approx(x, abs=1e-6)
        assert orbit.log_deriv_prefix[i] == pytest.approx(total, rel=1e-6)
    assert orbit.dC[0] == pytest.approx(m.dC(0.1234))
    assert orbit.dS[0] == pytest.approx(m.dS(0.1234))


def test_orbit_start_inside_exclusion_raises() -> None:
    m = canonical()
    with pytest.raises(SingularProximity):
        iterate_orbit(m, 1e-15, 5)


def test_orbit_truncates_at_wide_exclusion() -> None:
    m = canonical()
    policy = PrecisionPolicy(singular_exclusion_radius=0.2, promotion_threshold=0.3)
    orbit = iterate_orbit(m, 0.27, 10_000, policy)
    assert orbit.truncated
    assert orbit.steps < 10_000
    assert np.all(orbit.dS >= 0.2)


def test_extended_precision_agrees_with_double() -> None:
    m = canonical()
    double = iterate_orbit(m, 0.37, 3)
    extended = iterate_orbit(m, 0.37, 3, PrecisionPolicy(working_precision="extended"))
    assert extended.flags[:3] == ("promoted",) * 3
    assert extended.points[1] == pytest.approx(double.points[1], abs=1e-10)
    assert extended.log_deriv_prefix[1] == pytest.approx(double.log_deriv_prefix[1], rel=1e-10)


def test_precision_policy_ordering() -> None:
    prof = ExperimentProfile.practical(200.0)
    PrecisionPolicy().check(prof)
    with pytest.raises(ValueError):
        PrecisionPolicy(singular_exclusion_radius=1e-6, promotion_threshold=1e-8).check(prof)


def test_contraction_radius_first_terms() -> None:
    m = canonical()
    x = 0.1
    orbit = iterate_orbit(m, x, 10)
    cd = compute_contraction(m, orbit, 10)
    assert math.isinf(cd.log_Dn[0])
    expected = math.log(m.dC(x) * m.dS(x)) - 0.5 * math.log(m.L)
    assert cd.log_Dn[1] == pytest.approx(expected)
    # every added term is positive, so D_n strictly decreases
    assert np.all(np.diff(cd.log_Dn[1:]) < 0)
    assert cd.base_point == pytest.approx(x)


def test_contraction_needs_enough_steps() -> None:
    m = canonical()
    orbit = iterate_orbit(m, 0.1, 3)
    with pytest.raises(ValueError):
        compute_contraction(m, orbit, 10)


def test_advance_matches_scalar_map() -> None:
    m = canonical()
    xs = np.array([0.1, 0.2, 0.6, 0.9])
    nxt, ld, ok = advance(m, xs)
    assert ok.all()
    for x, y, l in zip(xs, nxt, ld):
        assert y == pytest.approx(eval_map(m, x))
        assert l == pytest.approx(math.log(abs(eval_derivatives(m, x)[0])))


def test_log_derivative_many_matches_orbit() -> None:
    m = canonical()
    total, lift = log_derivative_many(m, np.array([0.1234]), 3)
    orbit = iterate_orbit(m, 0.1234, 3)
    assert total[0] == pytest.approx(orbit.log_deriv_prefix[3], rel=1e-8)
    assert lift[0] % 1.0 == pytest.approx(orbit.points[3], abs=1e-6)


def test_distortion_report_fields() -> None:
    m = canonical()
    rep = check_distortion(m, 0.1, 3, 200, np.random.default_rng(0))
    assert rep.n == 3
    assert rep.Dn > 0.0
    assert rep.max_ratio >= 1.0
    assert rep.passed == (rep.max_ratio <= 2.0 * (1.0 + 1e-9))


def test_expansion_report_is_consistent() -> None:
    m = canonical()
    prof = ExperimentProfile.practical(200.0)
    rep = check_expansion_outside(m, prof, 20, np.random.default_rng(0), max_steps=50)
    assert rep.trials == 20
    assert 0 <= rep.violations <= rep.checked <= 20
    assert 0.0 <= rep.violation_rate <= 1.0


def test_deep_return_expansion_is_positive() -> None:
    m = canonical()
    orbit = iterate_orbit(m, 0.1, 6)
    assert deep_return_expansion(m, orbit, 5) > 0.0
    with pytest.raises(ValueError):
        deep_return_expansion(m, orbit, 0)
