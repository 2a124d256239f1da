import math

from hypothesis import given
from hypothesis import strategies as st
import numpy as np
import pytest

from circlab.common.errors import NotAFreeReturn, OutOfBindingRange
from circlab.map_core import (
    CircleMap,
    ExperimentProfile,
    circle_distance,
    eval_derivatives,
    eval_map,
    fit_derivative_bounds,
)
from circlab.orbit_engine import iterate_orbit
from circlab.return_structure import (
    BindingIntervals,
    ReturnDecomposition,
    ReturnEvent,
    bound_period_of,
    bound_period_ratio,
    build_all_bindings,
    build_binding_intervals,
    classify_returns,
    decompose_orbit,
    depth_sums,
    free_segments_of,
    is_deep,
    lookup_bound_period,
    r_index,
    theta_contributions,
)

C = 0.3
TOY = BindingIntervals(critical_point=C, radii=(math.inf, *(0.2 * 0.5 ** (p - 1) for p in range(1, 9))))


def linear_scan(b: BindingIntervals, x: float) -> int | None:
    for p, (lo, hi), (mlo, mhi) in b.entries:
        if lo < x <= hi or mlo <= x < mhi:
            return p
    return None


@given(st.floats(min_value=C - 0.4, max_value=C + 0.4))
def test_lookup_agrees_with_linear_scan(x: float) -> None:
    p = linear_scan(TOY, x)
    if p is not None:
        assert lookup_bound_period(TOY, x) == (p, False)
    elif x > C + TOY.outer_radius or x < C - TOY.outer_radius:
        assert lookup_bound_period(TOY, x, clamp_outer=True) == (2, True)
        with pytest.raises(OutOfBindingRange):
            lookup_bound_period(TOY, x)
    else:
        with pytest.raises(OutOfBindingRange):
            lookup_bound_period(TOY, x, clamp_outer=True)


def test_lookup_edges_belong_to_outer_interval() -> None:
    assert lookup_bound_period(TOY, C + 0.2) == (2, False)
    assert lookup_bound_period(TOY, C - 0.2) == (2, False)
    assert lookup_bound_period(TOY, C + 0.15) == (2, False)
    assert lookup_bound_period(TOY, C + 0.07) == (3, False)


def test_lookup_uses_the_circle() -> None:
    b = BindingIntervals(critical_point=0.05, radii=TOY.radii)
    # 0.92 sits 0.13 to the left of 0.05 on the circle
    assert lookup_bound_period(b, 0.92) == (2, False)
    assert lookup_bound_period(b, -0.08) == (2, False)


def test_lookup_reports_the_time() -> None:
    with pytest.raises(OutOfBindingRange) as err:
        lookup_bound_period(TOY, C, time=17)
    assert err.value.time == 17


def test_r_index_examples() -> None:
    assert r_index(0.5, 10.0) == 1
    assert r_index(0.1, 10.0) == 2
    assert r_index(0.05, 10.0) == 2
    assert r_index(200.0**-1.5, 200.0) == 2


@given(st.floats(min_value=1e-30, max_value=0.999), st.sampled_from([10.0, 200.0, 1e4]))
def test_r_index_brackets_distance(d: float, L: float) -> None:
    r = r_index(d, L)
    assert L ** (-r) < d <= L ** (-r + 1)


def test_is_deep_rule() -> None:
    assert is_deep([-2.0], 0)
    # a closer return after a shallow one is deep
    assert is_deep([-1.0, -3.0], 1)
    assert not is_deep([-3.0, -1.0], 1)


def event(time: int, p: int, distance: float = 1e-3, depth: str = "unclassified") -> ReturnEvent:
    return ReturnEvent(
        time=time, critical_point=C, distance=distance, r_index=r_index(distance, 200.0), bound_period=p, depth=depth
    )


def test_free_segments() -> None:
    assert free_segments_of([event(3, 4), event(10, 2)], 20) == ((0, 3), (7, 10), (12, 20))
    assert free_segments_of([event(18, 5)], 20) == ((0, 18),)
    assert free_segments_of([], 5) == ((0, 5),)


def test_depth_sums_and_ratio() -> None:
    d = ReturnDecomposition(
        events=(event(1, 2, 1e-2, "deep"), event(5, 2, 1e-1, "shallow"), event(9, 3, 1e-4, "deep")),
        free_segments=(),
        horizon=20,
        log_base=100.0,
    )
    sums = depth_sums(d)
    assert sums.deep == pytest.approx(-3.0)
    assert sums.shallow == pytest.approx(-0.5)
    assert sums.holds
    e = event(0, 40, 1e-4)
    assert bound_period_ratio(e, 100.0, 1e-3) == pytest.approx(0.01)


@pytest.fixture(scope="module")
def canonical_decomposition():
    m = CircleMap(a=0.3, L=200.0)
    bindings = build_all_bindings(m, fit_derivative_bounds(m, 10_000), 15)
    profile = ExperimentProfile.practical(200.0)
    orbit = iterate_orbit(m, 0.1234, 2000)
    return m, bindings, profile, orbit, decompose_orbit(m, orbit, profile, bindings)


def test_binding_radii_shrink(canonical_decomposition) -> None:
    _, bindings, _, _, _ = canonical_decomposition
    assert len(bindings) == 2
    for b in bindings:
        assert b.p_max == 15
        radii = np.array(b.radii[1:])
        assert np.all(np.diff(radii) < 0)


def test_decomposition_structure(canonical_decomposition) -> None:
    m, _, profile, orbit, d = canonical_decomposition
    assert d.horizon == orbit.steps
    assert len(d.events) > 2
    for e in d.events:
        assert orbit.dC[e.time] < profile.delta
        assert e.distance == pytest.approx(float(orbit.dC[e.time]))
        assert e.bound_period >= 2
        assert e.r_index == r_index(e.distance, m.L)
        if e.clamped:
            assert e.bound_period == 2
    for a, b in zip(d.events, d.events[1:]):
        assert b.time >= a.time + a.bound_period
    assert d.free_segments[0][0] == 0
    for lo, hi in d.free_segments:
        assert lo <= hi
        assert all(orbit.dC[t] >= profile.delta for t in range(lo, min(hi, d.horizon + 1)))


def test_classification_marks_first_return_deep(canonical_decomposition) -> None:
    *_, d = canonical_decomposition
    classified = classify_returns(d)
    assert classified.events[0].depth == "deep"
    assert {e.depth for e in classified.events} <= {"deep", "shallow"}
    assert [e.time for e in classified.events] == [e.time for e in d.events]


def test_theta_pieces_partition_the_sum(canonical_decomposition) -> None:
    m, _, profile, orbit, d = canonical_decomposition
    with pytest.raises(NotAFreeReturn):
        theta_contributions(m, orbit, d, d.events[1].time, profile)
    classified = classify_returns(d)
    nu = classified.events[2].time
    report = theta_contributions(m, orbit, classified, nu, profile)
    assert len(report.log_theta_k) == 2
    assert len(report.recovery_margins) == len(report.bound_segment_margins) == 2
    assert report.diagnostics["recovery"] == all(v >= 0 for v in report.recovery_margins)
    pieces = np.logaddexp.reduce(np.array([report.log_theta_0, *report.log_theta_k]))
    assert pieces == pytest.approx(report.log_total, rel=1e-9)
    assert set(report.diagnostics) >= {"bound_segments", "free_part", "recovery"}
    assert (report.deep_expansion_margin is None) == (classified.events[2].depth != "deep")


def test_bound_period_of_matches_lookup() -> None:
    for x in (C + 0.07, C - 0.03, C + 0.004):
        assert bound_period_of(TOY, x) == linear_scan(TOY, x)
    with pytest.raises(OutOfBindingRange):
        bound_period_of(TOY, C + 0.35)


def test_binding_intervals_need_two_periods() -> None:
    m = CircleMap(a=0.3, L=200.0)
    with pytest.raises(ValueError):
        build_binding_intervals(m, m.critical.points[0], 1, fit_derivative_bounds(m, 10_000))


def test_classification_is_idempotent(canonical_decomposition) -> None:
    *_, d = canonical_decomposition
    once = classify_returns(d)
    assert classify_returns(once) == once


def rescan(orbit, delta: float, bindings) -> list[tuple[int, float, int]]:
    found = []
    t = 0
    while t <= orbit.steps:
        if orbit.dC[t] >= delta:
            t += 1
            continue
        x = float(orbit.points[t])
        b = min(bindings, key=lambda b: float(circle_distance(x, b.critical_point)))
        xs = x + round(b.critical_point - x)
        p = linear_scan(b, xs)
        if p is None:
            assert abs(xs - b.critical_point) > b.outer_radius
            p = 2
        found.append((t, b.critical_point, p))
        t += p
    return found


def deep_by_definition(logs: list[float], k: int) -> bool:
    return all(2.0 * sum(logs[j + 1 : k + 1]) <= logs[j] for j in range(k))


def test_decomposition_matches_a_rescan(canonical_decomposition) -> None:
    m, bindings, profile, orbit, d = canonical_decomposition
    assert [(e.time, e.critical_point, e.bound_period) for e in d.events] == rescan(orbit, profile.delta, bindings)
    classified = classify_returns(d)
    logs = [math.log(e.distance) / math.log(m.L) for e in classified.events]
    for k, e in enumerate(classified.events):
        assert e.depth == ("deep" if deep_by_definition(logs, k) else "shallow")


def test_binding_radii_match_a_direct_sum(canonical_decomposition) -> None:
    m, bindings, *_ = canonical_decomposition
    K0 = fit_derivative_bounds(m, 10_000).K0
    for b in bindings:
        x = float(eval_map(m, b.critical_point))
        total, deriv = 0.0, 1.0
        for p in range(1, 4):
            total += deriv / (float(m.dC(x)) * float(m.dS(x)))
            D = 1.0 / (math.sqrt(m.L) * total)
            assert b.radii[p] == pytest.approx(math.sqrt(D / (K0 * m.L)), rel=1e-6)
            deriv *= abs(float(eval_derivatives(m, x)[0]))
            x = float(eval_map(m, x))


def test_binding_intervals_tile(canonical_decomposition) -> None:
    _, bindings, *_ = canonical_decomposition
    rng = np.random.default_rng(4)
    for b in bindings:
        for p in range(3, b.p_max + 1):
            assert b.interval(p)[1] == b.interval(p - 1)[0]
            assert b.mirror(p)[0] == b.mirror(p - 1)[1]
        c, r = b.critical_point, b.outer_radius
        xs = c + rng.uniform(-r, r, size=2000)
        xs = xs[np.abs(xs - c) > b.radii[-1]]
        for x in xs:
            hits = sum(lo < x <= hi or mlo <= x < mhi for _, (lo, hi), (mlo, mhi) in b.entries)
            assert hits == 1


def test_bound_periods_stay_within_the_log_bound(canonical_decomposition) -> None:
    m, _, profile, _, d = canonical_decomposition
    assert max(bound_period_ratio(e, m.L, profile.lam) for e in d.events) <= 1.5


def test_shallow_returns_rarely_dominate(canonical_decomposition) -> None:
    m, bindings, profile, _, _ = canonical_decomposition
    rng = np.random.default_rng(5)
    holds = []
    for x0 in rng.uniform(size=20):
        orbit = iterate_orbit(m, float(x0), 500)
        d = classify_returns(decompose_orbit(m, orbit, profile, bindings))
        holds.append(depth_sums(d).holds)
    assert sum(holds) >= 18
