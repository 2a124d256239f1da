"""Binding intervals, bound/free decomposition of orbits, deep/shallow
classification and the Theta contributions to the contraction sums.

Depths and r-indices use logarithms base L; everything else is natural log.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field, replace
import math
from typing import Literal, Sequence

import numpy as np
from scipy.special import logsumexp

from .common.errors import CriticalOrbitTruncated, NotAFreeReturn, OutOfBindingRange
from .map_core import CircleMap, DerivativeBounds, ExperimentProfile, eval_map
from .orbit_engine import (
    OrbitRecord,
    PrecisionPolicy,
    compute_contraction,
    deep_return_expansion,
    iterate_orbit,
)

Depth = Literal["deep", "shallow", "unclassified"]


# ---------- Binding intervals ----------
@dataclass(frozen=True)
class BindingIntervals:
    """I_p(c) = (c + r_p, c + r_{p-1}] and I_{-p}(c) = [c - r_{p-1}, c - r_p), 2 <= p <= p_max,
    with r_p = sqrt(D_p(v0) / (K0 L)) and v0 = f(c)."""

    critical_point: float
    radii: tuple[float, ...]  # radii[p] for p = 0..p_max; radii[0] is unused (inf)

    @property
    def p_max(self) -> int:
        return len(self.radii) - 1

    @property
    def right_edges(self) -> tuple[float, ...]:
        # ascending: c + r_{p_max}, ..., c + r_1
        c = self.critical_point
        return tuple(c + r for r in reversed(self.radii[1:]))

    @property
    def left_edges(self) -> tuple[float, ...]:
        # ascending: c - r_1, ..., c - r_{p_max}
        c = self.critical_point
        return tuple(c - r for r in self.radii[1:])

    def interval(self, p: int) -> tuple[float, float]:
        c = self.critical_point
        return c + self.radii[p], c + self.radii[p - 1]

    def mirror(self, p: int) -> tuple[float, float]:
        c = self.critical_point
        return c - self.radii[p - 1], c - self.radii[p]

    @property
    def entries(self) -> list[tuple[int, tuple[float, float], tuple[float, float]]]:
        return [(p, self.interval(p), self.mirror(p)) for p in range(2, self.p_max + 1)]

    @property
    def outer_radius(self) -> float:
        return self.radii[1]


def build_binding_intervals(
    m: CircleMap,
    c: float,
    p_max: int,
    bounds: DerivativeBounds,
    policy: PrecisionPolicy | None = None,
) -> BindingIntervals:
    if p_max < 2:
        raise ValueError("p_max must be at least 2")
    v0 = eval_map(m, c)
    orbit = iterate_orbit(m, v0, p_max, policy)
    if orbit.steps < p_max - 1 or (orbit.truncated and orbit.steps < p_max):
        raise CriticalOrbitTruncated(c, orbit.steps + 1)
    cd = compute_contraction(m, orbit, p_max)
    log_r = 0.5 * (cd.log_Dn[1 : p_max + 1] - math.log(bounds.K0 * m.L))
    return BindingIntervals(critical_point=float(c), radii=(math.inf, *np.exp(log_r).tolist()))


def build_all_bindings(
    m: CircleMap, bounds: DerivativeBounds, p_max: int, policy: PrecisionPolicy | None = None
) -> tuple[BindingIntervals, ...]:
    return tuple(build_binding_intervals(m, c, p_max, bounds, policy) for c in m.critical.points)


def binding_for(bindings: Sequence[BindingIntervals], x: float) -> BindingIntervals:
    """Binding family of the critical point nearest to x."""
    return min(bindings, key=lambda b: abs((x - b.critical_point + 0.5) % 1.0 - 0.5))


def lookup_bound_period(
    b: BindingIntervals, x: float, clamp_outer: bool = False, time: int | None = None
) -> tuple[int, bool]:
    """(p, clamped). With ``clamp_outer`` a point beyond I_2 gets p = 2."""
    c = b.critical_point
    xs = x + round(c - x)
    if xs == c:
        raise OutOfBindingRange(f"x = {x!r} is the critical point itself", time)
    pm = b.p_max
    if xs > c:
        idx = bisect_left(b.right_edges, xs)
        if idx == 0:
            raise OutOfBindingRange(f"x = {x!r} is inside I_{pm}(c); raise p_max", time)
        if idx == pm:
            if clamp_outer:
                return 2, True
            raise OutOfBindingRange(f"x = {x!r} lies beyond I_2(c)", time)
        return pm - idx + 1, False
    j = bisect_right(b.left_edges, xs)
    if j == pm:
        raise OutOfBindingRange(f"x = {x!r} is inside I_-{pm}(c); raise p_max", time)
    if j == 0:
        if clamp_outer:
            return 2, True
        raise OutOfBindingRange(f"x = {x!r} lies beyond I_-2(c)", time)
    return j + 1, False


def bound_period_of(b: BindingIntervals, x: float) -> int:
    return lookup_bound_period(b, x)[0]


# ---------- Decomposition ----------
@dataclass(frozen=True)
class ReturnEvent:
    time: int
    critical_point: float
    distance: float
    r_index: int
    bound_period: int
    depth: Depth = "unclassified"
    clamped: bool = False


@dataclass(frozen=True)
class ReturnDecomposition:
    events: tuple[ReturnEvent, ...]
    free_segments: tuple[tuple[int, int], ...]
    horizon: int
    log_base: float  # L

    def event_at(self, time: int) -> ReturnEvent | None:
        for e in self.events:
            if e.time == time:
                return e
        return None


def r_index(distance: float, L: float) -> int:
    """Unique r with L^{-r} < distance <= L^{-r+1}."""
    r = math.floor(-math.log(distance) / math.log(L)) + 1
    while distance <= L ** (-r):
        r += 1
    while distance > L ** (-r + 1):
        r -= 1
    return r


def free_segments_of(events: Sequence[ReturnEvent], horizon: int) -> tuple[tuple[int, int], ...]:
    segs = []
    start = 0
    for e in events:
        segs.append((start, e.time))
        start = e.time + e.bound_period
    if start <= horizon:
        segs.append((start, horizon))
    return tuple(segs)


def decompose_orbit(
    m: CircleMap,
    orbit: OrbitRecord,
    profile: ExperimentProfile,
    bindings: Sequence[BindingIntervals],
    clamp_outer: bool = True,
) -> ReturnDecomposition:
    """Free returns n_1 < n_1 + p_1 <= n_2 < ... to C_delta along the orbit."""
    horizon = orbit.steps
    events: list[ReturnEvent] = []
    t = 0
    while t <= horizon:
        d = float(orbit.dC[t])
        if d < profile.delta:
            x = float(orbit.points[t])
            b = binding_for(bindings, x)
            p, clamped = lookup_bound_period(b, x, clamp_outer=clamp_outer, time=t)
            events.append(
                ReturnEvent(
                    time=t,
                    critical_point=b.critical_point,
                    distance=d,
                    r_index=r_index(d, m.L),
                    bound_period=p,
                    clamped=clamped,
                )
            )
            t += p
        else:
            t += 1
    return ReturnDecomposition(
        events=tuple(events),
        free_segments=free_segments_of(events, horizon),
        horizon=horizon,
        log_base=m.L,
    )


def is_deep(log_dists: Sequence[float], k: int) -> bool:
    """Depth rule for the k-th free return given base-L log distances of all returns."""
    if k == 0:
        return True
    lhs = 2.0 * log_dists[k]
    for j in range(k - 1, -1, -1):
        # lhs accumulates 2 log d over returns strictly after j and before k
        if lhs > log_dists[j]:
            return False
        lhs += 2.0 * log_dists[j]
    return True


def classify_returns(d: ReturnDecomposition) -> ReturnDecomposition:
    lnL = math.log(d.log_base)
    logs = [math.log(e.distance) / lnL for e in d.events]
    events = tuple(
        replace(e, depth="deep" if is_deep(logs, k) else "shallow") for k, e in enumerate(d.events)
    )
    return replace(d, events=events)


# ---------- Theta contributions ----------
@dataclass(frozen=True)
class ThetaReport:
    nu: int
    log_theta_0: float
    log_theta_k: tuple[float, ...]
    log_total: float
    # bound - lhs in natural log; >= 0 means the bound holds
    bound_segment_margins: tuple[float, ...]
    free_margin: float
    deep_expansion_margin: float | None
    recovery_margins: tuple[float, ...]
    diagnostics: dict[str, bool] = field(default_factory=dict)

    @property
    def theta_0(self) -> float:
        return math.exp(self.log_theta_0) if self.log_theta_0 < 700 else math.inf

    @property
    def theta_k(self) -> list[float]:
        return [math.exp(v) if v < 700 else math.inf for v in self.log_theta_k]


def theta_contributions(
    m: CircleMap,
    orbit: OrbitRecord,
    d: ReturnDecomposition,
    nu: int,
    profile: ExperimentProfile,
) -> ThetaReport:
    """Split sum_{i<nu} d_i^{-1} into bound-segment pieces Theta_k and the free rest Theta_0."""
    event = d.event_at(nu)
    if event is None or event.depth == "unclassified":
        raise NotAFreeReturn(f"time {nu} is not a classified free return")
    P = orbit.log_deriv_prefix
    log_inv = P[:nu] - np.log(orbit.dC[:nu] * orbit.dS[:nu])
    free = np.ones(nu, dtype=bool)
    log_theta_k = []
    seg_margins = []
    recovery = []
    lam, alpha = profile.lam, profile.alpha
    lnL = math.log(m.L)
    for e in d.events:
        if e.time >= nu:
            break
        lo, hi = e.time, e.time + e.bound_period
        free[lo:hi] = False
        lt = float(logsumexp(log_inv[lo:hi]))
        log_theta_k.append(lt)
        lhs = lt - P[hi]
        bound = -(18.0 * alpha / lam) * math.log(e.distance)
        seg_margins.append(bound - lhs)
        gained = P[hi] - P[lo]
        need = max((-1.0 + 16.0 * alpha / lam) * math.log(e.distance), lam * e.bound_period * lnL / 3.0)
        recovery.append(gained - need)
    log_total = float(logsumexp(log_inv)) if nu else -math.inf
    log_theta_0 = float(logsumexp(log_inv[free])) if free.any() else -math.inf
    free_margin = -math.log(profile.delta) / 3.0 - (log_theta_0 - P[nu])
    deep_margin = None
    if event.depth == "deep" and nu > 0:
        deep_margin = math.log(deep_return_expansion(m, orbit, nu))
    diagnostics = {
        "bound_segments": all(v >= 0 for v in seg_margins),
        "free_part": free_margin > 0,
        "recovery": all(v >= 0 for v in recovery),
    }
    if deep_margin is not None:
        diagnostics["deep_expansion"] = deep_margin >= 0
    return ThetaReport(
        nu=nu,
        log_theta_0=log_theta_0,
        log_theta_k=tuple(log_theta_k),
        log_total=log_total,
        bound_segment_margins=tuple(seg_margins),
        free_margin=free_margin,
        deep_expansion_margin=deep_margin,
        recovery_margins=tuple(recovery),
        diagnostics=diagnostics,
    )


def bound_period_ratio(event: ReturnEvent, L: float, lam: float) -> float:
    """p / log_L |c - x|^{-2/lam}; at most 1 asymptotically."""
    denom = (-2.0 / lam) * math.log(event.distance) / math.log(L)
    return event.bound_period / denom


@dataclass(frozen=True)
class DepthSums:
    shallow: float
    deep: float
    holds: bool


def depth_sums(d: ReturnDecomposition) -> DepthSums:
    """Base-L log distances summed over shallow and over deep returns."""
    lnL = math.log(d.log_base)
    shallow = sum(math.log(e.distance) / lnL for e in d.events if e.depth == "shallow")
    deep = sum(math.log(e.distance) / lnL for e in d.events if e.depth == "deep")
    return DepthSums(shallow=shallow, deep=deep, holds=shallow >= deep)
