import math

import numpy as np
import pytest

from circlab.common.errors import InsufficientData, NegativeVarianceEstimate, NoiseDominated
from circlab.ergodic_stats import (
    CorrelationData,
    EmpiricalMeasure,
    InducedInvariantMeasure,
    Observable,
    StatReport,
    clt_test,
    coboundary_diagnostic,
    coboundary_of,
    correlation_decay,
    correlation_sequence,
    entropy_check,
    estimate_acim_birkhoff,
    estimate_acim_induced,
    green_kubo,
    local_entropy_probe,
    lyapunov_direct,
    lyapunov_exponent,
    periodic_points,
    rho_beta,
)
from circlab.inducing import Branch, InducedMarkovMap, lift_iterate
from circlab.map_core import CircleMap, ExperimentProfile


def canonical() -> CircleMap:
    return CircleMap(a=0.3, L=200.0)


def uniform(bins: int = 100) -> EmpiricalMeasure:
    return EmpiricalMeasure(bins, np.full(bins, 1.0 / bins), "birkhoff")


def test_observable_evaluation() -> None:
    phi = Observable(cosine_coeffs=(1.0,), sine_coeffs=(0.0, 2.0), constant=0.5)
    x = np.array([0.0, 0.125, 0.25])
    expected = 0.5 + np.cos(2 * np.pi * x) + 2.0 * np.sin(4 * np.pi * x)
    assert phi(x) == pytest.approx(expected)
    assert not phi.is_constant
    assert Observable(constant=3.0).is_constant


def test_bin_averages_are_exact() -> None:
    phi = Observable.cosine()
    avg = phi.bin_averages(4)
    # int_0^{1/4} cos(2 pi x) dx * 4 = 2 / pi
    assert avg == pytest.approx([2 / math.pi, -2 / math.pi, -2 / math.pi, 2 / math.pi])
    assert phi.mean(uniform()) == pytest.approx(0.0, abs=1e-12)
    shifted = Observable(cosine_coeffs=(1.0,), constant=0.7)
    assert shifted.centered(uniform()).mean(uniform()) == pytest.approx(0.0, abs=1e-12)


def test_tv_distance_and_sampling() -> None:
    a = uniform(4)
    b = EmpiricalMeasure(2, np.array([1.0, 0.0]), "induced")
    assert a.tv_distance(a) == 0.0
    assert a.tv_distance(b) == pytest.approx(0.5)
    xs = b.sample(1000, np.random.default_rng(0))
    assert np.all((xs >= 0.0) & (xs < 0.5))
    assert b.density_at(0.2) == pytest.approx(2.0)
    assert b.density_at(1.7) == 0.0


def test_green_kubo_sum() -> None:
    data = CorrelationData(np.array([1.0, 0.3, 0.1, 0.001]), noise_floor=0.01, usable=3)
    s2, lag = green_kubo(data)
    assert lag == 2
    assert s2 == pytest.approx(1.8)


def test_green_kubo_clips_small_negative_values() -> None:
    data = CorrelationData(np.array([1.0, -0.51]), noise_floor=0.01, usable=2)
    assert green_kubo(data) == (0.0, 1)


def test_green_kubo_rejects_negative_variance() -> None:
    data = CorrelationData(np.array([1.0, -0.8, -0.5]), noise_floor=0.01, usable=3)
    with pytest.raises(NegativeVarianceEstimate) as err:
        green_kubo(data)
    assert err.value.lag == 2
    assert err.value.sigma_squared == pytest.approx(-1.6)


def test_constant_observable_has_degenerate_clt() -> None:
    m = canonical()
    res = clt_test(m, Observable(constant=0.0), uniform(), 10, 100, seed=1)
    assert res.sigma_squared == 0.0
    assert res.ks_distance == 0.0
    assert np.all(res.values == 0.0)


def test_rho_beta() -> None:
    m = canonical()
    c = m.critical.points[0]
    assert rho_beta(m, c + 1e-5, 1e-3) == pytest.approx(1e-5, rel=1e-6)
    assert rho_beta(m, 0.5 - 2e-4, 1e-3) == pytest.approx(2e-4, rel=1e-6)
    assert rho_beta(m, 0.1, 1e-3) == 1e-3


def test_local_entropy_argument_checks() -> None:
    m = canonical()
    profile = ExperimentProfile.practical(200.0)
    with pytest.raises(ValueError):
        local_entropy_probe(m, uniform(), profile, profile.delta, 1, 5)
    empty = local_entropy_probe(m, uniform(), profile, 1e-3, 3, 0)
    assert empty.values == [] and empty.inclusion_checked == 0


def test_lyapunov_quadrature_under_lebesgue() -> None:
    m = canonical()
    xs = (np.arange(1_000_000) + 0.5) / 1_000_000
    _, _, fp = m.lift_array(xs)
    riemann = float(np.mean(np.log(np.abs(fp))))
    assert lyapunov_exponent(m, uniform()) == pytest.approx(riemann, rel=1e-3)


def test_birkhoff_measure_and_lyapunov() -> None:
    m = canonical()
    mu = estimate_acim_birkhoff(m, 20, 1000, 100, 100, seed=1)
    assert mu.source == "birkhoff"
    assert mu.bin_masses.sum() == pytest.approx(1.0)
    direct = lyapunov_direct(m, 20, 1000, 100, seed=1)
    assert direct > 0.0
    assert lyapunov_exponent(m, mu) == pytest.approx(direct, rel=0.1)


def test_birkhoff_does_not_depend_on_workers() -> None:
    m = canonical()
    one = estimate_acim_birkhoff(m, 300, 50, 10, 50, seed=7, n_jobs=1)
    two = estimate_acim_birkhoff(m, 300, 50, 10, 50, seed=7, n_jobs=2)
    assert np.array_equal(one.bin_masses, two.bin_masses)


def test_birkhoff_input_checks() -> None:
    m = canonical()
    with pytest.raises(ValueError):
        estimate_acim_birkhoff(m, 10, 100, 100, 10)
    with pytest.raises(InsufficientData):
        estimate_acim_birkhoff(m, 2, 100, 10, 10)


def test_correlation_sequence_shape() -> None:
    m = canonical()
    phi = Observable.cosine()
    data = correlation_sequence(m, phi, phi, uniform(), 5, 20_000, seed=2)
    assert data.covariances.shape == (6,)
    assert data.covariances[0] > 0.0
    assert data.noise_floor > 0.0
    assert 1 <= data.usable <= 6


def test_periodic_points_are_fixed() -> None:
    m = canonical()
    pts = periodic_points(m, 1, limit=20)
    assert 0 < len(pts) <= 20
    for x in pts:
        shift = float(lift_iterate(m, [x], 1)[0]) - x
        assert abs(shift - round(shift)) < 1e-8


def test_coboundary_averages_vanish_on_periodic_orbits() -> None:
    m = canonical()
    psi = Observable.cosine()
    cob = coboundary_diagnostic(m, coboundary_of(m, psi), (1, 2), limit=10)
    assert cob.orbit_averages.size > 0
    assert cob.max_abs < 1e-6
    plain = coboundary_diagnostic(m, psi, (1, 2), limit=10)
    assert plain.max_abs > 1e-2


def toy_map(total_mass: float) -> InducedMarkovMap:
    branches = [
        Branch(
            anchor=anchor,
            dsize=0.5,
            log_size=math.log(0.5),
            weight=0.5,
            return_time=R,
            large_scale_times=[R - 1],
            tail_step=1,
            lap_lo=0.0,
            lap_hi=1.0,
            hist_P=np.zeros(3),
            node_P=np.full(3, log_F),
        )
        for anchor, R, log_F in ((0.0, 1, 2.0), (0.5, 2, 4.0))
    ]
    return InducedMarkovMap(branches, total_mass=total_mass, unresolved_measure=1.0 - total_mass, harvest="laps")


def test_entropy_check_balances_return_time_and_lyapunov() -> None:
    nu = InducedInvariantMeasure(
        ulam_bins=2,
        stationary_density=np.ones(2),
        mean_return_time=1.5,
        residual=0.0,
        iterations=1,
        branch_masses=np.array([0.5, 0.5]),
    )
    report = entropy_check(toy_map(1.0), nu, canonical(), lyapunov=2.0)
    assert report.integral_log_F == pytest.approx(3.0)
    assert report.mean_return_time == pytest.approx(1.5)
    assert report.residual == pytest.approx(0.0, abs=1e-12)
    assert report.entropy == pytest.approx(2.0)
    off = entropy_check(toy_map(1.0), nu, canonical(), lyapunov=2.5)
    assert off.residual == pytest.approx(0.2)


def test_induced_measure_needs_full_mass() -> None:
    with pytest.raises(InsufficientData):
        estimate_acim_induced(toy_map(0.5), canonical(), 10)


def test_correlation_decay_reports_noise() -> None:
    # one sample per orbit: the floor sits far above every lag past zero
    with pytest.raises(NoiseDominated):
        correlation_decay(canonical(), Observable.cosine(), Observable.cosine(), uniform(), 10, 100, seed=3)


def test_stat_report_names_its_fields() -> None:
    rep = StatReport(0.9, (0.4, 1.2, 0.97), (0.3, 0.01), 0.005, [0.8, 1.0], {"correlations": "ok"})
    assert rep.to_dict() == {
        "lyapunov": 0.9,
        "correlation_fit": {"tau": 0.4, "constant": 1.2, "r_squared": 0.97},
        "clt": {"sigma_squared": 0.3, "ks_distance": 0.01},
        "entropy_residual": 0.005,
        "local_entropy_samples": [0.8, 1.0],
        "notes": {"correlations": "ok"},
    }
    assert StatReport(0.9, None, (0.3, 0.01), 0.0, []).to_dict()["correlation_fit"] is None


def identity_induced_map(pieces: int = 2000) -> InducedMarkovMap:
    # F = f on a fine partition of the circle; every return time is 1
    w = 1.0 / pieces
    branches = []
    for i in range(pieces):
        lo = i * w
        branches.append(
            Branch(
                anchor=lo,
                dsize=w,
                log_size=math.log(w),
                weight=w,
                return_time=1,
                large_scale_times=[0],
                tail_step=1,
                lap_lo=lo,
                lap_hi=lo + w,
                hist_P=np.zeros(3),
                node_P=np.zeros(3),
                trace=((lo, lo + w, 0.0, 0.0, 0.0),),
            )
        )
    return InducedMarkovMap(branches, total_mass=1.0, unresolved_measure=0.0, harvest="laps")


def test_induced_measure_of_f_itself_matches_birkhoff() -> None:
    m = canonical()
    nu, mu = estimate_acim_induced(identity_induced_map(), m, 200, seed=0)
    assert nu.branch_masses.sum() == pytest.approx(1.0)
    assert mu.bin_masses.sum() == pytest.approx(1.0)
    assert mu.source == "induced"
    assert nu.mean_return_time == pytest.approx(1.0)
    assert nu.residual < 1e-8
    birkhoff = estimate_acim_birkhoff(m, 2000, 300, 100, 200, seed=1)
    assert mu.tv_distance(birkhoff) < 0.1


def test_local_entropy_balls_shrink_with_n() -> None:
    m = canonical()
    profile = ExperimentProfile.practical(200.0)
    short = local_entropy_probe(m, uniform(), profile, 1e-3, 3, 5, seed=11, check_points=50)
    long = local_entropy_probe(m, uniform(), profile, 1e-3, 3, 10, seed=11, check_points=50)
    for res in (short, long):
        assert len(res.values) == 3
        assert all(math.isfinite(v) and v > 0.0 for v in res.values)
        assert res.inclusion_checked == 150
        assert res.inclusion_failures == 0
    assert all(b < a for a, b in zip(short.ball_sizes, long.ball_sizes))
