"""Finite-horizon checker for the standing assumptions on the critical
orbits, and the parameter sweep that estimates how much of [0, 1) passes.

A pass only means "no violation up to the horizon"; every verdict carries
that label.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
import math
from typing import Callable, Literal, NamedTuple, Sequence

from joblib import Parallel, delayed
import numpy as np

from .common.errors import SingularProximity
from .common.log import get_logger
from .map_core import CircleMap, ExperimentProfile, eval_map
from .orbit_engine import OrbitRecord, PrecisionPolicy, iterate_orbit

log = get_logger("assumptions")

HORIZON_LABEL = "finite-horizon approximation"
Condition = Literal["a", "G1", "G2", "G3", "proximity"]
CONDITIONS: tuple[Condition, ...] = ("a", "G1", "G2", "G3", "proximity")


class Failure(NamedTuple):
    condition: Condition
    critical_point: float
    time: int


@dataclass(frozen=True)
class AssumptionVerdict:
    passed: bool
    first_failure: Failure | None
    horizon: int
    label: str = HORIZON_LABEL

    def __post_init__(self) -> None:
        if self.passed != (self.first_failure is None):
            raise ValueError("passed must hold exactly when there is no failure")


def checker_profile(profile: ExperimentProfile, sigma: float | None = None) -> ExperimentProfile:
    """Thresholds the checker can meet at desk-scale L.

    Asymptotic ("paper" mode) profiles are returned unchanged. For practical ones alpha is tied to
    delta through delta = L^(-alpha N0), and sigma may be lowered: with
    Phi = sin 2 pi x no point is L^(-1/6)-far from both C and S below L ~ 1e5.
    """
    if profile.mode == "paper":
        return profile
    alpha = -math.log(profile.delta) / (profile.N0 * math.log(profile.L))
    return replace(profile, alpha=alpha, sigma=profile.sigma if sigma is None else sigma)


def _first_failure(
    orbit: OrbitRecord, profile: ExperimentProfile, lnL: float, horizon: int
) -> tuple[Condition, int] | None:
    N0, sigma = profile.N0, profile.sigma
    top = min(N0, orbit.steps)
    bad = np.flatnonzero((orbit.dC[: top + 1] <= sigma) | (orbit.dS[: top + 1] <= sigma))
    if bad.size:
        return "a", int(bad[0])
    if horizon <= N0:
        return None

    P = orbit.log_deriv_prefix
    jmax = min(horizon + 1, orbit.steps)
    found: list[tuple[int, int, Condition]] = []

    # G1: P_j - P_i >= ln L + min(ln sigma, -alpha i ln L) for all i < j, via a running max
    i = np.arange(jmax)
    thr = lnL + np.minimum(math.log(sigma), -profile.alpha * i * lnL)
    need = np.maximum.accumulate(P[:jmax] + thr)
    bad = np.flatnonzero(P[1 : jmax + 1] < need)
    if bad.size:
        found.append((int(bad[0]) + 1, 0, "G1"))

    i = np.arange(1, jmax + 1)
    bad = np.flatnonzero(P[1 : jmax + 1] < profile.lam * i * lnL)
    if bad.size:
        found.append((int(bad[0]) + 1, 1, "G2"))

    hi = min(horizon, orbit.steps)
    if hi >= N0:
        i = np.arange(N0, hi + 1)
        with np.errstate(divide="ignore"):
            bad = np.flatnonzero(np.log(orbit.dS[N0 : hi + 1]) < -4.0 * profile.alpha * i * lnL)
        if bad.size:
            found.append((int(bad[0]) + N0, 2, "G3"))

    if found:
        t, _, cond = min(found)
        return cond, t
    return None


def check_dynamical_assumptions(
    m: CircleMap,
    profile: ExperimentProfile,
    horizon: int,
    policy: PrecisionPolicy | None = None,
) -> AssumptionVerdict:
    """(a) for n <= N0 and (G1)-(G3) up to ``horizon`` along every critical orbit.

    Critical points are taken in order; the verdict names the earliest failing
    time of the first critical point that fails.
    """
    if horizon < profile.N0:
        raise ValueError(f"horizon must be at least N0 = {profile.N0}, got {horizon}")
    lnL = math.log(m.L)
    for c in m.critical.points:
        try:
            orbit = iterate_orbit(m, eval_map(m, c), horizon + 1, policy)
        except SingularProximity:
            return AssumptionVerdict(False, Failure("proximity", c, 0), horizon)
        hit = _first_failure(orbit, profile, lnL, horizon)
        if hit is None and orbit.truncated and orbit.steps < horizon + 1:
            hit = ("proximity", orbit.steps + 1)
        if hit is not None:
            log.debug("a={:.6f} L={:g}: {} fails at n={} for c={:.6f}", m.a, m.L, hit[0], hit[1], c)
            return AssumptionVerdict(False, Failure(hit[0], c, hit[1]), horizon)
    return AssumptionVerdict(True, None, horizon)


# ---------- Sweep ----------
@dataclass(frozen=True)
class SweepRow:
    L: float
    accepted: int
    total: int
    # first failure per rejected grid point, keyed by condition
    histogram: dict[str, int] = field(default_factory=dict)

    @property
    def fraction(self) -> float:
        return self.accepted / self.total if self.total else 0.0


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    a_values: tuple[float, ...]
    verdicts: dict[float, tuple[AssumptionVerdict, ...]]
    horizon: int
    label: str = HORIZON_LABEL

    def table(self) -> list[tuple[float, float]]:
        return [(r.L, r.fraction) for r in self.rows]


ProfileSource = ExperimentProfile | Callable[[float], ExperimentProfile]


def _verdict_for(
    m: CircleMap, a: float, profile: ExperimentProfile, horizon: int, policy: PrecisionPolicy | None
) -> AssumptionVerdict:
    return check_dynamical_assumptions(m.with_a(a), profile, horizon, policy)


def sweep_parameters(
    m_template: CircleMap,
    a_grid: int,
    L_values: Sequence[float],
    profile: ProfileSource,
    horizon: int,
    *,
    n_jobs: int = 1,
    policy: PrecisionPolicy | None = None,
) -> SweepResult:
    """Accepted fraction of the uniform grid a = k / a_grid per L.

    ``profile`` is either one profile for every L or a factory called with L.
    """
    if a_grid < 100:
        raise ValueError(f"a_grid must be at least 100, got {a_grid}")
    a_values = tuple(k / a_grid for k in range(a_grid))
    rows = []
    verdicts: dict[float, tuple[AssumptionVerdict, ...]] = {}
    for L in L_values:
        m = replace(m_template, L=float(L))
        _ = m.marked  # computed once here so worker copies carry it
        prof = profile(float(L)) if callable(profile) else profile
        out = Parallel(n_jobs=n_jobs)(
            delayed(_verdict_for)(m, a, prof, horizon, policy) for a in a_values
        )
        hist = Counter(v.first_failure.condition for v in out if v.first_failure is not None)
        row = SweepRow(
            L=float(L),
            accepted=sum(v.passed for v in out),
            total=len(out),
            histogram={c: hist.get(c, 0) for c in CONDITIONS},
        )
        log.info(
            "L={:g}: {}/{} accepted ({:.3f}) up to n={}", L, row.accepted, row.total, row.fraction, horizon
        )
        rows.append(row)
        verdicts[float(L)] = tuple(out)
    return SweepResult(rows=tuple(rows), a_values=a_values, verdicts=verdicts, horizon=horizon)
