"""Stopping-time partitions, growth to the full circle and the induced
full-branch Markov map.

Elements are carried in image coordinates: an element that has been iterated
n times is described by f^n(omega) as a lifted interval together with
T_n = sum_{i<n} d_i^{-1} / |(f^n)'| and P_n = ln|(f^n)'| at three nodes of
the image. The cut width of [x, x + D_{n+1}(x)] seen in image coordinates is

    w(y) = 1 / (sqrt(L) * (T_n(y) + 1 / (d_C(y) d_S(y))))

so no sub-ulp domain coordinate is ever formed. Geometric domain sizes are
tracked separately (with their logarithm), and the represented measure of an
element is its ``weight``; the two coincide until a generation is thinned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Literal, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq
from scipy.stats import linregress

from .common.errors import (
    BudgetExceeded,
    GrowthFailed,
    InsufficientData,
    OutOfBindingRange,
    UnresolvableCut,
)
from .common.log import get_logger
from .common.settings import InducingConfig
from .map_core import CircleMap, DerivativeBounds, ExperimentProfile
from .return_structure import BindingIntervals, binding_for, is_deep, lookup_bound_period, r_index

log = get_logger("inducing")

Case = Literal["I", "II"]
TraceRow = tuple[float, float, float, float, float]  # lo, hi, P at lo/mid/hi

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_UNIFORM_NODES = 129
_GRADED_NODES = 48


# ---------- Types ----------
@dataclass
class PartitionElement:
    # image f^n(omega): lifted, lo in [0, 1)
    image_lo: float
    image_hi: float
    orient: int
    node_y: np.ndarray
    node_T: np.ndarray
    node_P: np.ndarray
    steps: int
    # geometric domain: anchor, size and its natural log
    dlo: float
    dsize: float
    log_size: float
    weight: float
    stop_time: int | None = None
    itinerary: list[tuple[int, int, float]] = field(default_factory=list)
    generation_log: list[tuple[int, Case]] = field(default_factory=list)
    # base-L log distances of all free returns so far
    return_logs: list[float] = field(default_factory=list)
    next_free: int = 0
    trace: tuple[TraceRow, ...] = ()

    @property
    def interval(self) -> tuple[float, float]:
        return self.dlo, self.dlo + self.dsize

    @property
    def image_length(self) -> float:
        return self.image_hi - self.image_lo

    @property
    def stopped(self) -> bool:
        return self.stop_time is not None

    @property
    def min_log_derivative(self) -> float:
        return float(np.min(self.node_P))


@dataclass
class StoppingPartition:
    base_interval: tuple[float, float]
    elements: list[PartitionElement]
    unresolved_measure: float
    tail_counts: dict[int, float]
    base_weight: float = 0.0

    @property
    def total_weight(self) -> float:
        return float(sum(e.weight for e in self.elements))

    @property
    def mass_defect(self) -> float:
        return abs(self.total_weight + self.unresolved_measure - self.base_weight)


@dataclass(frozen=True)
class GoodPair:
    outer: tuple[float, float]
    inner: tuple[float, float]
    M: int
    epsilon: float
    scenario: Literal["singular", "critical"] = "singular"


@dataclass
class Branch:
    anchor: float
    dsize: float
    log_size: float
    weight: float
    return_time: int
    large_scale_times: list[int]
    tail_step: int
    # stage coordinates of the final step: F = f^{tail} o (history) maps [lap_lo, lap_hi] onto a unit lap
    lap_lo: float
    lap_hi: float
    # ln|(f^{S_q})'| (all stages) at lap lo/mid/hi
    hist_P: np.ndarray
    # ln|F'| at lap lo/mid/hi
    node_P: np.ndarray
    coverage_defect: float = 0.0
    trace: tuple[TraceRow, ...] = ()

    @property
    def domain(self) -> tuple[float, float]:
        return self.anchor, self.anchor + self.dsize

    @property
    def log_derivative(self) -> float:
        return float(self.node_P[1])


@dataclass
class InducedMarkovMap:
    branches: list[Branch]
    total_mass: float
    unresolved_measure: float
    harvest: str
    distortion_constant: float = math.nan
    coverage_checked: int = 0
    max_gap: float = 0.0
    injective: bool = True
    stages: int = 0

    @property
    def coverage_defect(self) -> list[float]:
        return [b.coverage_defect for b in self.branches]

    @property
    def mean_return_time(self) -> float:
        w = np.array([b.weight for b in self.branches])
        r = np.array([b.return_time for b in self.branches])
        return float(np.sum(w * r) / np.sum(w))


# ---------- Helpers ----------
def quad_interp(nodes: np.ndarray, values: np.ndarray, y) -> np.ndarray:
    """Quadratic Lagrange interpolation through three (node, value) pairs."""
    y = np.asarray(y, dtype=float)
    x0, x1, x2 = nodes
    if not (x0 < x1 < x2):
        return np.full_like(y, values[1])
    v0, v1, v2 = values
    l0 = (y - x1) * (y - x2) / ((x0 - x1) * (x0 - x2))
    l1 = (y - x0) * (y - x2) / ((x1 - x0) * (x1 - x2))
    l2 = (y - x0) * (y - x1) / ((x2 - x0) * (x2 - x1))
    return v0 * l0 + v1 * l1 + v2 * l2


def pullback_mass(nodes: np.ndarray, P: np.ndarray, lo: float, y) -> np.ndarray:
    """Cumulative pull-back mass G(y) = int_lo^y exp(-(P(s) - min P)) ds."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    half = 0.5 * (y - lo)
    s = lo + half[:, None] * (_GL_X[None, :] + 1.0)
    ref = float(np.min(P))
    rho = np.exp(-(quad_interp(nodes, P, s) - ref))
    return half * (rho @ _GL_W)


def systematic_thin(
    weights: np.ndarray, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Systematic probability-proportional-to-weight selection of at most k items.

    Returns the kept indices and their new weights; the total is unchanged.
    """
    w = np.asarray(weights, dtype=float)
    if w.size <= k:
        return np.arange(w.size), w.copy()
    total = float(np.sum(w))
    step = total / k
    pos = rng.uniform(0.0, step) + step * np.arange(k)
    picks = np.searchsorted(np.cumsum(w), pos, side="right")
    picks = np.minimum(picks, w.size - 1)
    idx, counts = np.unique(picks, return_counts=True)
    return idx, counts * step


def _graded_offsets(length: float, end_marked: bool, resolution: float) -> np.ndarray:
    """Offsets in [0, length] from the cut start; geometric toward a marked end."""
    t = np.linspace(0.0, length, _UNIFORM_NODES)
    if end_marked:
        stop = length - resolution
        if stop <= 0.0:
            return np.empty(0)
        near = length - np.geomspace(max(0.5 * length, resolution), resolution, _GRADED_NODES)
        t = np.union1d(t[t <= stop], near)
        t = t[t <= stop]
    return t


def _cut_width_inverse(m: CircleMap, e: PartitionElement, y: np.ndarray) -> np.ndarray:
    """1 / w(y): cuts per unit image length."""
    T = np.clip(quad_interp(e.node_y, e.node_T, y), 0.0, None)
    with np.errstate(divide="ignore"):
        inv = 1.0 / (m.dC(y) * m.dS(y))
    return math.sqrt(m.L) * (T + inv)


def _segment_cuts(
    m: CircleMap, e: PartitionElement, start: float, end: float, end_marked: bool, resolution: float
) -> list[tuple[float, float]]:
    """Cut [start, end] (either direction) into pieces of one cut width each.

    The fractional remainder joins the last full piece; within ``resolution``
    of a marked end nothing is cut.
    """
    length = abs(end - start)
    sign = 1.0 if end >= start else -1.0
    t = _graded_offsets(length, end_marked, resolution)
    if t.size < 2:
        return []
    y = start + sign * t
    N = cumulative_trapezoid(_cut_width_inverse(m, e, y), t, initial=0.0)
    full = max(1, int(math.floor(N[-1])))
    inner = np.interp(np.arange(1, full, dtype=float), N, t)
    bounds = start + sign * np.concatenate(([t[0]], inner, [t[-1]]))
    return [(min(a, b), max(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _forward(m: CircleMap, e: PartitionElement, u: float, v: float):
    """Image, orientation and (y, T, P) nodes after one more step of [u, v]."""
    ys = np.array([u, 0.5 * (u + v), v])
    F, av, fp = m.lift_array(ys)
    if not (np.all(np.isfinite(F)) and np.all(av >= m.phi_floor) and np.all(fp != 0.0)):
        raise UnresolvableCut(f"orbit of [{u:.17g}, {v:.17g}] meets C or S")
    if np.any(np.sign(fp) != np.sign(fp[1])):
        raise UnresolvableCut(f"[{u:.17g}, {v:.17g}] is folded by f")
    T_prev = np.clip(quad_interp(e.node_y, e.node_T, ys), 0.0, None)
    P_prev = quad_interp(e.node_y, e.node_P, ys)
    T = (T_prev + 1.0 / (m.dC(ys) * m.dS(ys))) / np.abs(fp)
    P = P_prev + np.log(np.abs(fp))
    orient = int(np.sign(fp[1]))
    if orient < 0:
        F, T, P = F[::-1], T[::-1], P[::-1]
    shift = math.floor(F[0])
    return F - shift, orient, T, P, P_prev


def _note_return(
    child: PartitionElement,
    n: int,
    profile: ExperimentProfile,
    bindings: Sequence[BindingIntervals],
    L: float,
    p_max: int,
) -> None:
    if n < child.next_free or not bindings:
        return
    x = float(child.node_y[1]) % 1.0
    b = binding_for(bindings, x)
    d = abs((x - b.critical_point + 0.5) % 1.0 - 0.5)
    if d >= profile.delta or d == 0.0:
        return
    try:
        p, _ = lookup_bound_period(b, x, clamp_outer=True, time=n)
    except OutOfBindingRange:
        p = p_max
    child.next_free = n + p
    child.return_logs = [*child.return_logs, math.log(d) / math.log(L)]
    if is_deep(child.return_logs, len(child.return_logs) - 1):
        child.itinerary = [*child.itinerary, (n, r_index(d, L), b.critical_point)]


def refine_step(
    m: CircleMap,
    element: PartitionElement,
    step: int,
    profile: ExperimentProfile,
    bindings: Sequence[BindingIntervals],
    *,
    resolution: float = 1e-12,
    max_children: int | None = None,
    rng: np.random.Generator | None = None,
    p_max: int = 15,
) -> list[PartitionElement]:
    """Cut ``element`` (iterated step - 1 times) into step-th generation pieces.

    Mass the children do not carry (slivers at C and S, unresolvable pieces)
    is ``element.weight - sum(child.weight)``.
    """
    if element.stopped:
        raise ValueError("element already stopped")
    if element.steps != step - 1:
        raise ValueError(f"element has {element.steps} steps, refining step {step}")
    lo, hi = element.image_lo, element.image_hi
    marks = np.union1d(m.critical.lifted_between(lo, hi), m.singular.lifted_between(lo, hi))

    pieces: list[tuple[float, float]] = []
    if marks.size == 0:
        case: Case = "I"
        start, end = (lo, hi) if element.orient > 0 else (hi, lo)
        pieces = _segment_cuts(m, element, start, end, False, resolution)
    else:
        case = "II"
        edges = np.concatenate(([lo], marks, [hi]))
        for j, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
            mid = 0.5 * (a + b)
            left = _segment_cuts(m, element, mid, a, j > 0, resolution)
            right = _segment_cuts(m, element, mid, b, j < len(edges) - 2, resolution)
            pieces.extend(reversed(left))
            pieces.extend(right)
    if not pieces:
        return []

    bounds = np.array(pieces)
    G = pullback_mass(element.node_y, element.node_P, lo, bounds.ravel()).reshape(bounds.shape)
    total = float(pullback_mass(element.node_y, element.node_P, lo, [hi])[0])
    frac = np.clip((G[:, 1] - G[:, 0]) / total, 0.0, None)
    # domain offset of each piece's left end, in units of the parent's size
    offset = G[:, 0] / total if element.orient > 0 else 1.0 - G[:, 1] / total

    keep = np.flatnonzero(frac > 0.0)
    weights = element.weight * frac[keep]
    if max_children is not None and keep.size > max_children:
        sel, weights = systematic_thin(weights, max_children, rng or np.random.default_rng(step))
        keep = keep[sel]

    children: list[PartitionElement] = []
    for j, w in zip(keep, weights):
        u, v = bounds[j]
        try:
            F, orient, T, P, P_prev = _forward(m, element, float(u), float(v))
        except UnresolvableCut:
            continue
        child = PartitionElement(
            image_lo=float(F[0]),
            image_hi=float(F[2]),
            orient=element.orient * orient,
            node_y=F,
            node_T=T,
            node_P=P,
            steps=step,
            dlo=element.dlo + element.dsize * float(offset[j]),
            dsize=element.dsize * float(frac[j]),
            log_size=element.log_size + math.log(frac[j]),
            weight=float(w),
            itinerary=element.itinerary,
            generation_log=[*element.generation_log, (step, case)],
            return_logs=element.return_logs,
            next_free=element.next_free,
            trace=(*element.trace, (float(u), float(v), *map(float, P_prev))),
        )
        _note_return(child, step, profile, bindings, m.L, p_max)
        if step >= profile.M0 and step >= child.next_free and child.image_length >= profile.sqrt_delta:
            child.stop_time = step
        children.append(child)
    return children


# ---------- Stopping-time partition ----------
def root_element(
    lo: float,
    hi: float,
    weight: float | None = None,
    *,
    dlo: float | None = None,
    dsize: float | None = None,
    log_size: float | None = None,
) -> PartitionElement:
    """Unrefined element for the interval [lo, hi] (n = 0, T = P = 0)."""
    shift = math.floor(lo)
    lo, hi = lo - shift, hi - shift
    size = hi - lo if dsize is None else dsize
    return PartitionElement(
        image_lo=lo,
        image_hi=hi,
        orient=1,
        node_y=np.array([lo, 0.5 * (lo + hi), hi]),
        node_T=np.zeros(3),
        node_P=np.zeros(3),
        steps=0,
        dlo=lo if dlo is None else dlo,
        dsize=size,
        log_size=math.log(size) if log_size is None else log_size,
        weight=hi - lo if weight is None else weight,
    )


def _tail_counts(
    stopped: Sequence[PartitionElement], lost: Sequence[tuple[int, float]], horizon: int
) -> dict[int, float]:
    # unresolved mass lost at step k has S >= k
    s_times = np.array([e.stop_time for e in stopped], dtype=int)
    s_w = np.array([e.weight for e in stopped], dtype=float)
    l_times = np.array([k for k, _ in lost], dtype=int)
    l_w = np.array([w for _, w in lost], dtype=float)
    return {
        n: float(np.sum(s_w[s_times >= n]) + np.sum(l_w[l_times >= n])) for n in range(horizon + 1)
    }


def build_stopping_partition(
    m: CircleMap,
    I: tuple[float, float],
    profile: ExperimentProfile,
    bindings: Sequence[BindingIntervals],
    max_steps: int,
    *,
    population: int = 64,
    resolution: float = 1e-12,
    rng: np.random.Generator | None = None,
    root: PartitionElement | None = None,
    p_max: int = 15,
    budget_fraction: float = 0.1,
) -> StoppingPartition:
    """Refine I until every element reaches a large scale (n >= M0, |f^n omega| >= sqrt(delta)).

    Generations above ``population`` are thinned, conserving weight.
    """
    lo, hi = I
    length = hi - lo
    tol = 1e-12
    if not profile.delta / 10.0 - tol <= length <= profile.delta + tol:
        raise ValueError(f"base interval length {length:.3e} outside [delta/10, delta]")
    rng = rng or np.random.default_rng(0)
    root = root or root_element(lo, hi)
    base_weight = root.weight

    active = [root]
    stopped: list[PartitionElement] = []
    lost: list[tuple[int, float]] = []
    for n in range(1, max_steps + 1):
        if not active:
            break
        generation: list[PartitionElement] = []
        for e in active:
            kids = refine_step(
                m, e, n, profile, bindings,
                resolution=resolution, max_children=population, rng=rng, p_max=p_max,
            )
            sliver = e.weight - sum(k.weight for k in kids)
            if sliver > 0.0:
                lost.append((n, sliver))
            generation.extend(kids)
        if len(generation) > population:
            idx, w = systematic_thin(np.array([k.weight for k in generation]), population, rng)
            generation = [generation[i] for i in idx]
            for k, wk in zip(generation, w):
                k.weight = float(wk)
        stopped.extend(k for k in generation if k.stopped)
        active = [k for k in generation if not k.stopped]
        log.debug("step {}: {} stopped, {} active", n, len(stopped), len(active))
    for e in active:
        lost.append((max_steps + 1, e.weight))

    unresolved = float(sum(w for _, w in lost))
    stopped.sort(key=lambda e: e.dlo)
    partition = StoppingPartition(
        base_interval=(lo, hi),
        elements=stopped,
        unresolved_measure=unresolved,
        tail_counts=_tail_counts(stopped, lost, max_steps + 1),
        base_weight=base_weight,
    )
    if unresolved > budget_fraction * base_weight:
        raise BudgetExceeded(
            f"unresolved measure {unresolved:.3e} exceeds {budget_fraction:.0%} of the base interval",
            partition,
        )
    return partition


def tail_fit(counts: dict[int, float], floor: float = 1e-8) -> tuple[float, float, float]:
    """Least-squares line through ln(count) over entries above ``floor``: (rate, intercept, r^2)."""
    ns = np.array([n for n, v in sorted(counts.items()) if v > floor], dtype=float)
    vs = np.array([v for _, v in sorted(counts.items()) if v > floor], dtype=float)
    if ns.size < 2:
        return math.nan, math.nan, math.nan
    fit = linregress(ns, np.log(vs))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


def expansion_violations(partition: StoppingPartition, profile: ExperimentProfile) -> int:
    """Stopped elements whose ln|(f^S)'| dips below ln(delta^{-1/3}) at a node."""
    floor = -math.log(profile.delta) / 3.0
    return sum(1 for e in partition.elements if e.min_log_derivative < floor)


# ---------- Growth to the full circle ----------
def lift_iterate(m: CircleMap, x, k: int) -> np.ndarray:
    """Lifted f^k, vectorised; non-finite where an orbit meets S."""
    y = np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        for _ in range(k):
            y, _, _ = m.lift_array(y)
    return y


def _pull_back(m: CircleMap, u: float, v: float, k: int, target: float) -> float:
    """x in [u, v] with lifted f^k(x) = target, f^k monotone on [u, v]."""
    if k == 0:
        return target
    return brentq(lambda x: float(lift_iterate(m, [x], k)[0]) - target, u, v, xtol=1e-16, maxiter=200)


def singular_sub_branch(m: CircleMap, s: float, delta: float, side: int = 1) -> tuple[float, float, float]:
    """One-sided branch [s + delta/10, s + delta] (or its mirror) of a singular point.

    Returns (lo, hi, image length under f).
    """
    a, b = s + side * delta / 10.0, s + side * delta
    lo, hi = min(a, b), max(a, b)
    F = lift_iterate(m, [lo, hi], 1)
    return lo, hi, float(abs(F[1] - F[0]))


def _singular_hit(m: CircleMap, lo: float, hi: float, delta: float) -> tuple[float, float] | None:
    """Image-side subinterval next to a singular point whose f-image is exactly one lap."""
    for s in m.singular.lifted_between(lo + delta, hi - delta):
        a, b, length = singular_sub_branch(m, float(s), delta)
        if length < 1.0:
            continue
        Fb = float(lift_iterate(m, [b], 1)[0])
        Fa = float(lift_iterate(m, [a], 1)[0])
        target = Fb - math.copysign(1.0, Fb - Fa)
        z = brentq(lambda x: float(lift_iterate(m, [x], 1)[0]) - target, a, b, xtol=1e-16)
        return z, b
    return None


def _critical_hit(
    m: CircleMap, lo: float, hi: float, delta: float, bindings: Sequence[BindingIntervals], N1: int
) -> tuple[float, float] | None:
    """Subinterval of I_{N1}(c) whose f^{N1+1}-image is exactly one lap."""
    for c in m.critical.lifted_between(lo + delta, hi - delta):
        b = binding_for(bindings, float(c) % 1.0)
        if b.p_max < N1:
            continue
        shift = float(c) - b.critical_point
        a, z_hi = (x + shift for x in b.interval(N1))
        if a < lo or z_hi > hi:
            continue
        xs = np.linspace(a, z_hi, 257)
        Fx = lift_iterate(m, xs, N1 + 1)
        d = np.diff(Fx)
        if not np.all(np.isfinite(Fx)) or not (np.all(d > 0) or np.all(d < 0)):
            continue
        if abs(Fx[-1] - Fx[0]) < 1.0:
            continue
        target = Fx[0] + math.copysign(1.0, Fx[-1] - Fx[0])
        z = brentq(lambda x: float(lift_iterate(m, [x], N1 + 1)[0]) - target, a, z_hi, xtol=1e-16)
        return a, z
    return None


def _min_marked_distance(m: CircleMap, lo: float, hi: float, M: int, samples: int = 65) -> float:
    xs = np.linspace(lo, hi, samples)
    worst = math.inf
    for _ in range(M):
        worst = min(worst, float(np.min(m.dC(xs))), float(np.min(m.dS(xs))))
        xs, _, _ = m.lift_array(xs)
    return worst


def _remove_marked_neighbourhoods(m: CircleMap, lo: float, hi: float, delta: float) -> list[tuple[float, float]]:
    marks = np.union1d(
        m.critical.lifted_between(lo - delta, hi + delta), m.singular.lifted_between(lo - delta, hi + delta)
    )
    out, cur = [], lo
    for z in marks:
        if z - delta > cur:
            out.append((cur, min(z - delta, hi)))
        cur = max(cur, z + delta)
        if cur >= hi:
            break
    if cur < hi:
        out.append((cur, hi))
    return out


def epsilon_floor(
    m: CircleMap,
    profile: ExperimentProfile,
    bindings: Sequence[BindingIntervals],
    measured: float = math.inf,
) -> float:
    """min(delta/10, sigma/2, min_c sqrt(D_{N1+1}(c) / (K0 L)), measured)."""
    radii = [b.radii[min(profile.N1 + 1, b.p_max)] for b in bindings]
    return min(profile.delta / 10.0, profile.sigma / 2.0, min(radii, default=math.inf), measured)


def grow_to_full_circle(
    m: CircleMap,
    omega: tuple[float, float],
    profile: ExperimentProfile,
    bounds: DerivativeBounds,
    bindings: Sequence[BindingIntervals] | None = None,
    *,
    max_pieces: int = 64,
) -> GoodPair:
    """Good (epsilon, M)-pair inside the middle third of omega, |omega| >= sqrt(delta)."""
    lo, hi = omega
    if hi - lo < profile.sqrt_delta * (1.0 - 1e-12):
        raise ValueError(f"|omega| = {hi - lo:.3e} is below sqrt(delta)")
    if bindings is None:
        from .return_structure import build_all_bindings

        bindings = build_all_bindings(m, bounds, max(profile.N1 + 1, 2))
    delta = profile.delta
    third = (hi - lo) / 3.0
    # (domain lo, domain hi, image lo, image hi) with f^k monotone on the domain piece
    pieces = [(lo + third, hi - third, lo + third, hi - third)]
    limit = 2 * profile.M0
    for k in range(limit + 1):
        for u, v, a, b in pieces:
            found = _singular_hit(m, a, b, delta)
            scenario, extra = "singular", 1
            if found is None and k + profile.N1 + 1 <= limit:
                found = _critical_hit(m, a, b, delta, bindings, profile.N1)
                scenario, extra = "critical", profile.N1 + 1
            if found is None:
                continue
            x1 = _pull_back(m, u, v, k, found[0]) if k else found[0]
            x2 = _pull_back(m, u, v, k, found[1]) if k else found[1]
            inner = (min(x1, x2), max(x1, x2))
            M = k + extra
            ratio = (inner[1] - inner[0]) / (hi - lo)
            eps = min(ratio, _min_marked_distance(m, inner[0], inner[1], M))
            if eps <= 0.0:
                continue
            log.debug("good pair after {} steps ({}), M = {}", k, scenario, M)
            return GoodPair(outer=(lo, hi), inner=inner, M=M, epsilon=eps, scenario=scenario)
        nxt = []
        for u, v, a, b in pieces:
            for c, d in _remove_marked_neighbourhoods(m, a, b, delta):
                cu = _pull_back(m, u, v, k, c) if k else c
                cv = _pull_back(m, u, v, k, d) if k else d
                du, dv = min(cu, cv), max(cu, cv)
                img = lift_iterate(m, [du, dv], k + 1)
                if not np.all(np.isfinite(img)) or dv <= du:
                    continue
                nxt.append((du, dv, float(min(img)), float(max(img))))
        if not nxt:
            raise GrowthFailed("every piece fell into C_delta or S_delta", k)
        nxt.sort(key=lambda p: p[3] - p[2], reverse=True)
        pieces = nxt[:max_pieces]
    raise GrowthFailed("no component of C_delta or S_delta reached", limit)


# ---------- Full return map ----------
@dataclass
class _Task:
    """A delta-scale interval at stage time t0, waiting for its stopping partition."""

    lo: float
    hi: float
    weight: float
    dlo: float
    dsize: float
    log_size: float
    t0: int = 0
    large_scale_times: list[int] = field(default_factory=list)
    # ln|(f^{t0})'| over the interval (bounded distortion: one value)
    p_offset: float = 0.0
    trace: tuple[TraceRow, ...] = ()


def _monotone_grid(a: float, b: float, a_marked: bool, b_marked: bool, resolution: float) -> np.ndarray:
    lo = a + (resolution if a_marked else 0.0)
    hi = b - (resolution if b_marked else 0.0)
    if hi <= lo:
        return np.empty(0)
    pts = np.linspace(lo, hi, 257)
    half = 0.5 * (b - a)
    if a_marked and half > resolution:
        pts = np.union1d(pts, a + np.geomspace(resolution, half, 64))
    if b_marked and half > resolution:
        pts = np.union1d(pts, b - np.geomspace(resolution, half, 64))
    return pts[(pts >= lo) & (pts <= hi)]


def _preimages(m: CircleMap, ys: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Points of the monotone grid segment ``ys`` whose lifted f-image hits ``targets``."""
    F = m.lift_array(ys)[0]
    if F[-1] < F[0]:
        ys, F = ys[::-1], F[::-1]
    z = np.interp(targets, F, ys)
    lo, hi = float(np.min(ys)), float(np.max(ys))
    for _ in range(3):
        Fz, _, fpz = m.lift_array(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = (Fz - targets) / fpz
        z = np.clip(np.where(np.isfinite(step), z - step, z), lo, hi)
    return z


def _unit_laps(m: CircleMap, ys: np.ndarray) -> np.ndarray:
    """Ascending points of ``ys``'s span whose f-images are the integers inside the image."""
    F = m.lift_array(ys)[0]
    f0, f1 = sorted((float(F[0]), float(F[-1])))
    levels = np.arange(math.ceil(f0), math.floor(f1) + 1, dtype=float)
    if levels.size == 0:
        return np.empty(0)
    return np.sort(_preimages(m, ys, levels))


def _monotone_pieces(m: CircleMap, lo: float, hi: float) -> list[tuple[float, float, bool, bool]]:
    marks = np.union1d(m.critical.lifted_between(lo, hi), m.singular.lifted_between(lo, hi))
    edges = np.concatenate(([lo], marks, [hi]))
    last = len(edges) - 2
    return [(float(a), float(b), j > 0, j < last) for j, (a, b) in enumerate(zip(edges[:-1], edges[1:]))]


def _subdivide(
    m: CircleMap, u: float, v: float, tail: int, delta: float, min_len: float
) -> list[tuple[float, float, float, float]]:
    """Split [u, v] at preimages of an equal subdivision of its f^tail-image into delta-scale pieces.

    Returns (piece lo, piece hi, image lo, image hi); empty if the image is below ``min_len``.
    """
    ends = lift_iterate(m, [u, v], tail)
    if not np.all(np.isfinite(ends)):
        return []
    length = abs(float(ends[1] - ends[0]))
    if length < min_len:
        return []
    q = max(1, math.ceil(length / delta))
    targets = ends[0] + (ends[1] - ends[0]) * np.arange(q + 1) / q
    if tail == 0:
        cuts = targets
    elif tail == 1:
        cuts = _preimages(m, np.linspace(u, v, 257), targets[1:-1])
        cuts = np.concatenate(([u], cuts, [v]))
    else:
        cuts = np.array(
            [u]
            + [brentq(lambda x, t=t: float(lift_iterate(m, [x], tail)[0]) - t, u, v, xtol=1e-16) for t in targets[1:-1]]
            + [v]
        )
    out = []
    for j in range(q):
        a, b = sorted((float(cuts[j]), float(cuts[j + 1])))
        ia, ib = sorted((float(targets[j]), float(targets[j + 1])))
        if b > a:
            out.append((a, b, ia, ib))
    return out


class _Harvest:
    """Collects branches, restart tasks and unresolved mass for one stage."""

    def __init__(self, m: CircleMap, profile: ExperimentProfile, cfg: InducingConfig, rng: np.random.Generator):
        self.m, self.profile, self.cfg, self.rng = m, profile, cfg, rng
        self.branches: list[Branch] = []
        self.tasks: list[_Task] = []
        self.unresolved = 0.0

    def _share(self, e: PartitionElement, a: np.ndarray, b: np.ndarray):
        """Weight fraction and domain offset of sub-intervals [a, b] of the element image."""
        total = float(pullback_mass(e.node_y, e.node_P, e.image_lo, [e.image_hi])[0])
        Ga = pullback_mass(e.node_y, e.node_P, e.image_lo, a) / total
        Gb = pullback_mass(e.node_y, e.node_P, e.image_lo, b) / total
        frac = np.clip(Gb - Ga, 0.0, None)
        offset = Ga if e.orient > 0 else 1.0 - Gb
        return frac, offset

    def _branch(self, e, task, a, b, frac, offset, weight, tail, tail_logs) -> Branch:
        ys = np.array([a, 0.5 * (a + b), b])
        hist = task.p_offset + quad_interp(e.node_y, e.node_P, ys)
        S = task.t0 + e.stop_time
        return Branch(
            anchor=e.dlo + e.dsize * offset,
            dsize=e.dsize * frac,
            log_size=e.log_size + math.log(frac),
            weight=weight,
            return_time=S + tail,
            large_scale_times=[*task.large_scale_times, S],
            tail_step=tail,
            lap_lo=a,
            lap_hi=b,
            hist_P=hist,
            node_P=hist + tail_logs,
            trace=(*e.trace, (a, b, *map(float, hist - task.p_offset))),
        )

    def _restart(self, e, task, pieces, tail: int) -> float:
        """Queue delta-scale pieces (at time S + tail); returns the weight queued."""
        if not pieces:
            return 0.0
        arr = np.array(pieces)
        frac, offset = self._share(e, arr[:, 0], arr[:, 1])
        weights = e.weight * frac
        idx, w = systematic_thin(weights, self.cfg.restarts_per_element, self.rng)
        S = task.t0 + e.stop_time
        for j, wj in zip(idx, w):
            a, b, ia, ib = pieces[j]
            if frac[j] <= 0.0:
                continue
            mid = np.array([0.5 * (a + b)])
            p_here = float(quad_interp(e.node_y, e.node_P, mid)[0])
            logs = np.zeros(1)
            y = mid
            for _ in range(tail):
                F, _, fp = self.m.lift_array(y)
                logs += np.log(np.abs(fp))
                y = F
            shift = math.floor(ia)
            self.tasks.append(
                _Task(
                    lo=ia - shift,
                    hi=ib - shift,
                    weight=float(wj),
                    dlo=e.dlo + e.dsize * float(offset[j]),
                    dsize=e.dsize * float(frac[j]),
                    log_size=e.log_size + math.log(frac[j]),
                    t0=S + tail,
                    large_scale_times=[*task.large_scale_times, S],
                    p_offset=task.p_offset + p_here + float(logs[0]),
                    trace=(*e.trace, (a, b, *map(float, quad_interp(e.node_y, e.node_P, np.array([a, mid[0], b])))))
                    if tail
                    else e.trace,
                )
            )
        return float(np.sum(weights[frac > 0.0]))

    def laps(self, e: PartitionElement, task: _Task) -> None:
        """Every complete unit lap of f over f^S(omega) becomes a branch with R = S + 1."""
        res, delta = self.cfg.resolution, self.profile.delta
        lap_a, lap_b, partial = [], [], []
        for a, b, am, bm in _monotone_pieces(self.m, e.image_lo, e.image_hi):
            ys = _monotone_grid(a, b, am, bm, res)
            if ys.size < 2:
                continue
            z = _unit_laps(self.m, ys)
            if z.size == 0:
                partial.append((float(ys[0]), float(ys[-1])))
                continue
            lap_a.extend(z[:-1])
            lap_b.extend(z[1:])
            partial.append((float(ys[0]), float(z[0])))
            partial.append((float(z[-1]), float(ys[-1])))
        assigned = 0.0
        if lap_a:
            A, B = np.array(lap_a), np.array(lap_b)
            frac, offset = self._share(e, A, B)
            good = np.flatnonzero(frac > 0.0)
            weights = e.weight * frac[good]
            assigned += float(np.sum(weights))
            idx, w = systematic_thin(weights, self.cfg.laps_per_element, self.rng)
            for j, wj in zip(good[idx], w):
                a, b = float(A[j]), float(B[j])
                ys = np.array([a, 0.5 * (a + b), b])
                tail_logs = np.log(np.abs(self.m.lift_array(ys)[2]))
                self.branches.append(
                    self._branch(e, task, a, b, float(frac[j]), float(offset[j]), float(wj), 1, tail_logs)
                )
        pieces = []
        for u, v in partial:
            if v > u:
                pieces.extend(_subdivide(self.m, u, v, 1, delta, delta / 10.0))
        assigned += self._restart(e, task, pieces, 1)
        self.unresolved += max(e.weight - assigned, 0.0)

    def pair(self, e: PartitionElement, task: _Task, bounds: DerivativeBounds, bindings) -> None:
        """One good pair per stopped element; the two outer components restart at time S."""
        lo, hi = e.image_lo, e.image_hi
        delta = self.profile.delta
        omega = (lo, lo + min(hi - lo, 1.0 - 1e-9))
        try:
            gp = grow_to_full_circle(self.m, omega, self.profile, bounds, bindings)
        except (GrowthFailed, ValueError, RuntimeError) as exc:
            log.debug("no good pair for element at {:.6g}: {}", e.dlo, exc)
            gp = None
        assigned = 0.0
        outer = [(lo, hi)]
        if gp is not None:
            a, b = gp.inner
            frac, offset = self._share(e, np.array([a]), np.array([b]))
            if frac[0] > 0.0:
                ys = np.array([a, 0.5 * (a + b), b])
                tail_logs = np.zeros(3)
                y = ys
                for _ in range(gp.M):
                    F, _, fp = self.m.lift_array(y)
                    tail_logs += np.log(np.abs(fp))
                    y = F
                w = e.weight * float(frac[0])
                assigned += w
                self.branches.append(self._branch(e, task, a, b, float(frac[0]), float(offset[0]), w, gp.M, tail_logs))
                outer = [(lo, a), (b, hi)]
        pieces = []
        for u, v in outer:
            pieces.extend(_subdivide(self.m, u, v, 0, delta, delta / 10.0))
        assigned += self._restart(e, task, pieces, 0)
        self.unresolved += max(e.weight - assigned, 0.0)


@dataclass(frozen=True)
class CoverageReport:
    checked: int
    max_gap: float
    max_endpoint_defect: float
    injective: bool
    distortion_constant: float


def verify_branches(
    m: CircleMap, branches: Sequence[Branch], samples: int = 4096, limit: int = 256
) -> CoverageReport:
    """Endpoint wrap for every branch; dense coverage, monotonicity and distortion on up to ``limit``."""
    worst_end = 0.0
    for b in branches:
        ends = lift_iterate(m, [b.lap_lo, b.lap_hi], b.tail_step)
        b.coverage_defect = abs(abs(float(ends[1] - ends[0])) - 1.0)
        worst_end = max(worst_end, b.coverage_defect)
    eps = np.finfo(float).eps
    wide = [b for b in branches if b.lap_hi - b.lap_lo > 1e6 * eps * max(1.0, abs(b.lap_lo))]
    wide.sort(key=lambda b: b.weight, reverse=True)
    max_gap, injective, spread = 0.0, True, 0.0
    for b in wide[:limit]:
        xs = np.linspace(b.lap_lo, b.lap_hi, samples)
        y, logs = xs, np.zeros_like(xs)
        for _ in range(b.tail_step):
            F, _, fp = m.lift_array(y)
            logs += np.log(np.abs(fp))
            y = F
        d = np.diff(y)
        injective &= bool(np.all(d > 0) or np.all(d < 0))
        pts = np.sort(np.mod(y, 1.0))
        gaps = np.diff(np.concatenate((pts, [pts[0] + 1.0])))
        max_gap = max(max_gap, float(np.max(gaps)))
        nodes = np.array([b.lap_lo, 0.5 * (b.lap_lo + b.lap_hi), b.lap_hi])
        total = quad_interp(nodes, b.hist_P, xs) + logs
        spread = max(spread, float(np.max(total) - np.min(total)))
    return CoverageReport(
        checked=min(len(wide), limit),
        max_gap=max_gap,
        max_endpoint_defect=worst_end,
        injective=injective,
        distortion_constant=math.exp(spread),
    )


def _base_tasks(delta: float) -> list[_Task]:
    n = math.ceil(1.0 / delta)
    edges = np.arange(n + 1) / n
    return [
        _Task(lo=float(a), hi=float(b), weight=1.0 / n, dlo=float(a), dsize=1.0 / n, log_size=-math.log(n))
        for a, b in zip(edges[:-1], edges[1:])
    ]


def _thin_items(items: list, k: int, rng: np.random.Generator) -> list:
    if len(items) <= k:
        return items
    idx, w = systematic_thin(np.array([it.weight for it in items]), k, rng)
    kept = [items[i] for i in idx]
    for it, wi in zip(kept, w):
        it.weight = float(wi)
    return kept


def build_full_return_map(
    m: CircleMap,
    profile: ExperimentProfile,
    bindings: Sequence[BindingIntervals],
    mass_target: float = 0.999,
    budget: InducingConfig | None = None,
    *,
    bounds: DerivativeBounds | None = None,
    rng: np.random.Generator | None = None,
) -> InducedMarkovMap:
    """Alternate stopping partitions and harvests until the branches carry ``mass_target``.

    S^1 is cut into ceil(1/delta) equal pieces; every stage partitions the
    pending delta-scale intervals, turns stopped elements into branches and
    queues what is left (leftovers are restarted at their own time).
    """
    cfg = budget or InducingConfig()
    if cfg.harvest == "pair" and bounds is None:
        raise ValueError("pair harvest needs derivative bounds")
    rng = rng or np.random.default_rng(0)
    tasks = _thin_items(_base_tasks(profile.delta), cfg.base_intervals, rng)

    branches: list[Branch] = []
    unresolved = 0.0
    total = 0.0
    stages = 0
    for stages in range(1, cfg.max_stages + 1):
        h = _Harvest(m, profile, cfg, rng)
        for task in tasks:
            root = root_element(
                task.lo, task.hi, task.weight, dlo=task.dlo, dsize=task.dsize, log_size=task.log_size
            )
            root.trace = task.trace
            part = build_stopping_partition(
                m, (task.lo, task.hi), profile, bindings, cfg.max_steps,
                population=cfg.population, resolution=cfg.resolution, rng=rng,
                root=root, p_max=cfg.p_max, budget_fraction=1.0,
            )
            h.unresolved += part.unresolved_measure
            for e in part.elements:
                if cfg.harvest == "laps":
                    h.laps(e, task)
                else:
                    h.pair(e, task, bounds, bindings)
        branches.extend(_thin_items(h.branches, cfg.population * cfg.base_intervals, rng))
        tasks = _thin_items(h.tasks, cfg.base_intervals, rng)
        unresolved += h.unresolved
        total = float(sum(b.weight for b in branches))
        log.info(
            "stage {}: {} branches, mass {:.6f}, pending {:.3e}, unresolved {:.3e}",
            stages, len(branches), total, sum(t.weight for t in tasks), unresolved,
        )
        if total >= mass_target or not tasks:
            break
    unresolved += float(sum(t.weight for t in tasks))

    report = verify_branches(m, branches, cfg.coverage_samples, cfg.verify_limit)
    result = InducedMarkovMap(
        branches=branches,
        total_mass=total,
        unresolved_measure=unresolved,
        harvest=cfg.harvest,
        distortion_constant=report.distortion_constant,
        coverage_checked=report.checked,
        max_gap=report.max_gap,
        injective=report.injective,
        stages=stages,
    )
    if total < mass_target:
        raise BudgetExceeded(f"branches carry {total:.6f} < {mass_target} after {stages} stages", result)
    return result


def tail_statistics(imap: InducedMarkovMap, floor: float = 1e-8):
    """Mass of {R = n} per n and the exponential fit (rate, intercept, r^2) over bins above ``floor``."""
    if imap.total_mass <= 0.9:
        raise InsufficientData(f"total mass {imap.total_mass:.4f} is too small for a tail fit")
    counts: dict[int, float] = {}
    for b in imap.branches:
        counts[b.return_time] = counts.get(b.return_time, 0.0) + b.weight
    counts = dict(sorted(counts.items()))
    return counts, tail_fit(counts, floor)
