"""The circle-map family f(x) = x + a + L ln|Phi(x)|.

Phi is a trigonometric polynomial, so the map is a genuine degree-one circle
map away from the zeros of Phi (the singular set S), and its critical set C
is the zero set of the pole-free trigonometric polynomial g = Phi + L Phi'
(f' = g / Phi). Everything here is immutable and safe to share across
workers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
import math
from typing import Callable, Literal

import numpy as np
from scipy.optimize import brentq

from .common.errors import (
    DegeneratePhi,
    NoZeros,
    SingularProximity,
    UnboundedRatio,
    UnresolvedRoot,
)

TWO_PI = 2.0 * math.pi
ROOT_RESIDUAL = 1e-12


def circle_distance(x, p):
    """Distance on R/Z, vectorised; always in [0, 1/2]."""
    return np.abs(np.mod(np.asarray(x, dtype=float) - p + 0.5, 1.0) - 0.5)


# ---------- Phi ----------
@dataclass(frozen=True)
class PhiSpec:
    """Phi(x) = offset + sum_k [c_k cos(2 pi k x) + s_k sin(2 pi k x)], k >= 1."""

    cosine_coefficients: tuple[float, ...] = ()
    sine_coefficients: tuple[float, ...] = (1.0,)
    constant_offset: float = 0.0
    tol_transverse: float = 1e-6
    tol_morse: float = 1e-6

    def __post_init__(self) -> None:
        cos_c = tuple(float(c) for c in self.cosine_coefficients)
        sin_c = tuple(float(s) for s in self.sine_coefficients)
        n = max(len(cos_c), len(sin_c))
        if n == 0 or not any(cos_c + sin_c):
            raise NoZeros("Phi is constant; it needs at least one nonzero harmonic")
        object.__setattr__(self, "cosine_coefficients", cos_c + (0.0,) * (n - len(cos_c)))
        object.__setattr__(self, "sine_coefficients", sin_c + (0.0,) * (n - len(sin_c)))
        self.certify()

    @property
    def degree(self) -> int:
        return len(self.cosine_coefficients)

    @cached_property
    def _arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = np.arange(1, self.degree + 1, dtype=float)
        return k, np.array(self.cosine_coefficients), np.array(self.sine_coefficients)

    def evaluate(self, x, order: int = 0):
        """Return (Phi, Phi', ..., Phi^(order)) at x; arrays in, arrays out."""
        # reduced first, so Phi(x + 1) == Phi(x) whenever x + 1 is exact
        xs = np.mod(np.asarray(x, dtype=float), 1.0)
        k, c, s = self._arrays
        theta = TWO_PI * np.multiply.outer(xs, k)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        out = [self.constant_offset + cos_t @ c + sin_t @ s]
        w = TWO_PI * k
        if order >= 1:
            out.append(cos_t @ (w * s) - sin_t @ (w * c))
        if order >= 2:
            out.append(-(cos_t @ (w * w * c) + sin_t @ (w * w * s)))
        return tuple(out)

    def scalar(self, x: float) -> tuple[float, float, float]:
        """Phi, Phi', Phi'' at a single point without numpy overhead."""
        x = x % 1.0
        v = self.constant_offset
        d1 = d2 = 0.0
        for i, (c, s) in enumerate(zip(self.cosine_coefficients, self.sine_coefficients), 1):
            w = TWO_PI * i
            ct, st = math.cos(w * x), math.sin(w * x)
            v += c * ct + s * st
            d1 += w * (s * ct - c * st)
            d2 -= w * w * (c * ct + s * st)
        return v, d1, d2

    def certify(self, grid_points: int = 4096) -> None:
        """Morse and transversality certificates; raises NoZeros / DegeneratePhi."""
        zeros = trig_zeros(lambda t: self.evaluate(t, 1)[:2], grid_points)
        if zeros.size == 0:
            raise NoZeros("Phi has no sign change on [0, 1)")
        _, d1 = self.evaluate(zeros, 1)
        if np.any(np.abs(d1) <= self.tol_transverse):
            bad = float(zeros[np.argmin(np.abs(d1))])
            raise DegeneratePhi(f"zero of Phi at {bad:.12g} is not transverse")
        extrema = trig_zeros(lambda t: self.evaluate(t, 2)[1:], grid_points)
        if extrema.size:
            _, _, d2 = self.evaluate(extrema, 2)
            if np.any(np.abs(d2) <= self.tol_morse):
                bad = float(extrema[np.argmin(np.abs(d2))])
                raise DegeneratePhi(f"critical point of Phi at {bad:.12g} is degenerate")


def trig_zeros(
    h: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], grid_points: int
) -> np.ndarray:
    """Zeros of a smooth period-1 function located by sign changes on a grid.

    ``h`` returns (value, derivative). The grid is offset by half a cell so
    symmetric roots never sit on a node; each bracket is refined with brentq
    and certified by the Newton step |h/h'| < 1e-12.
    """
    n = int(grid_points)
    xs = (np.arange(n) + 0.5) / n
    vals = h(xs)[0]
    roots: list[float] = []
    exact = np.flatnonzero(vals == 0.0)
    roots.extend(xs[exact].tolist())

    nxt = np.roll(vals, -1)
    brackets = np.flatnonzero(np.sign(vals) * np.sign(nxt) < 0)

    def scalar(t: float) -> float:
        return float(h(np.array([t]))[0][0])

    for j in brackets:
        lo, hi = xs[j], xs[j] + 1.0 / n  # last cell wraps past 1
        try:
            r = brentq(scalar, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
        except (ValueError, RuntimeError) as e:
            raise UnresolvedRoot(f"bracket [{lo:.6g}, {hi:.6g}] failed to converge") from e
        v, dv = (float(a[0]) for a in h(np.array([r])))
        residual = abs(v / dv) if dv != 0.0 else abs(v)
        if residual >= ROOT_RESIDUAL:
            raise UnresolvedRoot(f"root near {r:.12g} has residual {residual:.3e}")
        r = r % 1.0
        if r >= 1.0 - 1e-14:
            r = 0.0
        roots.append(r)

    out = np.sort(np.array(roots, dtype=float))
    if out.size > 1:
        gaps = np.diff(np.append(out, out[0] + 1.0))
        if np.min(gaps) <= 10.0 / n:
            raise UnresolvedRoot("roots closer than ten grid cells; refine grid_points")
    return out


# ---------- Marked sets ----------
@dataclass(frozen=True)
class MarkedSet:
    kind: Literal["critical", "singular"]
    points: tuple[float, ...]
    # |f'| at critical points, |Phi| at singular points
    certification: tuple[float, ...]

    @cached_property
    def array(self) -> np.ndarray:
        return np.array(self.points, dtype=float)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, x: float) -> tuple[float, float]:
        """(point, distance) of the nearest marked point to scalar x."""
        best_p, best_d = self.points[0], 1.0
        for p in self.points:
            d = abs((x - p + 0.5) % 1.0 - 0.5)
            if d < best_d:
                best_p, best_d = p, d
        return best_p, best_d

    def lifted_between(self, lo: float, hi: float) -> np.ndarray:
        """All lifts p + j with lo < p + j < hi, ascending."""
        if not self.points:
            return np.empty(0)
        j0, j1 = math.floor(lo) - 1, math.ceil(hi) + 1
        cand = (self.array[None, :] + np.arange(j0, j1 + 1)[:, None]).ravel()
        return np.sort(cand[(cand > lo) & (cand < hi)])


def distance_to_set(s: MarkedSet, x):
    """min_k dist_{S^1}(x, p_k); scalar in, float out."""
    if not s.points:
        raise ValueError("distance to an empty marked set")
    if np.ndim(x) == 0:
        return s.nearest(float(x))[1]
    xs = np.asarray(x, dtype=float)
    return np.min(circle_distance(xs[..., None], s.array), axis=-1)


# ---------- The map ----------
@dataclass(frozen=True)
class CircleMap:
    a: float
    L: float
    phi: PhiSpec = field(default_factory=PhiSpec)
    # |Phi| below this raises SingularProximity
    phi_floor: float = 1e-13
    grid_points: int = 4096

    def __post_init__(self) -> None:
        if not 0.0 <= self.a < 1.0:
            raise ValueError(f"a must lie in [0, 1), got {self.a}")
        if self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @cached_property
    def marked(self) -> tuple[MarkedSet, MarkedSet]:
        return find_marked_sets(self, self.grid_points)

    @property
    def critical(self) -> MarkedSet:
        return self.marked[0]

    @property
    def singular(self) -> MarkedSet:
        return self.marked[1]

    def with_a(self, a: float) -> CircleMap:
        """Same Phi and L, new rotation; C and S do not depend on a."""
        new = dataclasses.replace(self, a=a)
        if "marked" in self.__dict__:
            new.__dict__["marked"] = self.__dict__["marked"]
        return new

    def dC(self, x):
        return distance_to_set(self.critical, x)

    def dS(self, x):
        return distance_to_set(self.singular, x)

    # Scalar kernels used by the orbit loops
    def lift_scalar(self, x: float) -> tuple[float, float, float]:
        """(F(x), f'(x), f''(x)) on the lift, or SingularProximity."""
        v, d1, d2 = self.phi.scalar(x)
        if abs(v) < self.phi_floor:
            raise SingularProximity(x, v)
        q = d1 / v
        return (
            x + self.a + self.L * math.log(abs(v)),
            1.0 + self.L * q,
            self.L * (d2 / v - q * q),
        )

    def lift_array(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised (F, |Phi|, f') with no proximity check; callers mask."""
        v, d1 = self.phi.evaluate(xs, 1)
        av = np.abs(v)
        with np.errstate(divide="ignore", invalid="ignore"):
            F = xs + self.a + self.L * np.log(av)
            fp = 1.0 + self.L * d1 / v
        return F, av, fp


def _check_floor(m: CircleMap, x, v) -> None:
    av = np.abs(v)
    if np.any(av < m.phi_floor):
        idx = int(np.argmin(av)) if np.ndim(av) else 0
        xs = np.ravel(np.asarray(x, dtype=float))
        raise SingularProximity(float(xs[idx]), float(np.ravel(av)[idx]))


def eval_map(m: CircleMap, x, lift: bool = False):
    """x + a + L ln|Phi(x)|, reduced mod 1 unless ``lift``."""
    (v,) = m.phi.evaluate(x, 0)
    _check_floor(m, x, v)
    out = np.asarray(x, dtype=float) + m.a + m.L * np.log(np.abs(v))
    if not lift:
        out = np.mod(out, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def eval_derivatives(m: CircleMap, x):
    """Closed-form (f', f'') of the lift."""
    v, d1, d2 = m.phi.evaluate(x, 2)
    _check_floor(m, x, v)
    q = d1 / v
    fp = 1.0 + m.L * q
    fpp = m.L * (d2 / v - q * q)
    if np.ndim(fp) == 0:
        return float(fp), float(fpp)
    return fp, fpp


def find_marked_sets(m: CircleMap, grid_points: int) -> tuple[MarkedSet, MarkedSet]:
    """Critical set (zeros of Phi + L Phi') and singular set (zeros of Phi)."""
    if grid_points < 1000:
        raise ValueError("grid_points must be at least 1000")
    phi = m.phi
    sing = trig_zeros(lambda t: phi.evaluate(t, 1)[:2], grid_points)
    if sing.size == 0:
        raise NoZeros("Phi has no sign change on [0, 1)")

    def g(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v, d1, d2 = phi.evaluate(t, 2)
        return v + m.L * d1, d1 + m.L * d2

    crit = trig_zeros(g, grid_points)
    # A common zero of g and Phi would need Phi' = 0 at a zero of Phi
    if crit.size:
        crit = crit[np.min(circle_distance(crit[:, None], sing), axis=1) > 10.0 / grid_points]
    v_s, d1_s = phi.evaluate(sing, 1)
    singular = MarkedSet("singular", tuple(sing.tolist()), tuple(np.abs(v_s).tolist()))
    if crit.size:
        v_c, d1_c = phi.evaluate(crit, 1)
        cert = np.abs(1.0 + m.L * d1_c / v_c)
    else:
        cert = np.empty(0)
    critical = MarkedSet("critical", tuple(crit.tolist()), tuple(cert.tolist()))
    return critical, singular


# ---------- Derivative bound constants ----------
@dataclass(frozen=True)
class DerivativeBounds:
    K0: float
    eps0: float


@dataclass(frozen=True)
class BoundsCheck:
    passed: bool
    grid_points: int
    worst_first: float  # max of K0^{-1}-normalised |f'| ratio; <= 1 passes
    worst_second: float
    worst_critical: float


def _bound_ratios(m: CircleMap, xs: np.ndarray, eps0: float | None):
    dC = m.dC(xs)
    dS = m.dS(xs)
    keep = (dC > 1e-9) & (dS > 1e-6)
    xs, dC, dS = xs[keep], dC[keep], dS[keep]
    fp, fpp = eval_derivatives(m, xs)
    r1 = np.abs(fp) * dS / (m.L * dC)
    rb = np.abs(fpp) * dS**2 / m.L
    rc = None
    if eps0 is not None:
        near = dC <= eps0
        rc = np.abs(fpp[near]) / m.L
    return r1, rb, rc


def _fit_eps0(m: CircleMap, xs: np.ndarray) -> float:
    crit = m.critical.array
    if crit.size == 0:
        return 0.5 * float(np.min(np.diff(np.append(m.singular.array, m.singular.array[0] + 1.0))))
    sep = float(np.min(circle_distance(crit[:, None], m.singular.array)))
    floor = 0.5 * float(np.min(np.abs(eval_derivatives(m, crit)[1])))
    dC = m.dC(xs)
    eps = 0.5 * sep
    while eps > 1e-9:
        near = xs[dC <= eps]
        if near.size == 0 or np.min(np.abs(eval_derivatives(m, near)[1])) >= floor:
            return eps
        eps *= 0.8
    raise UnboundedRatio("no neighbourhood of C keeps |f''| away from zero")


def fit_derivative_bounds(m: CircleMap, grid_points: int) -> DerivativeBounds:
    """Smallest K0 (5% slack) and largest eps0 for the three derivative bounds."""
    xs = (np.arange(grid_points) + 0.5) / grid_points
    eps0 = _fit_eps0(m, xs)
    r1, rb, rc = _bound_ratios(m, xs, eps0)
    worst = [np.max(r1), np.max(1.0 / r1), np.max(rb)]
    if rc is not None and rc.size:
        worst += [np.max(rc), np.max(1.0 / rc)]
    K0 = 1.05 * max(1.0, *map(float, worst))
    if not math.isfinite(K0) or K0 > 1e6:
        raise UnboundedRatio(f"derivative ratios need K0 = {K0:.3e}")
    return DerivativeBounds(K0=K0, eps0=eps0)


def verify_derivative_bounds(m: CircleMap, b: DerivativeBounds, grid_points: int) -> BoundsCheck:
    """Re-check the three inequalities on an independent (shifted) grid."""
    xs = (np.arange(grid_points) + 0.25) / grid_points
    r1, rb, rc = _bound_ratios(m, xs, b.eps0)
    first = float(max(np.max(r1), np.max(1.0 / r1)) / b.K0)
    second = float(np.max(rb) / b.K0)
    crit = 0.0
    if rc is not None and rc.size:
        crit = float(max(np.max(rc), np.max(1.0 / rc)) / b.K0)
    return BoundsCheck(
        passed=first <= 1.0 and second <= 1.0 and crit < 1.0,
        grid_points=grid_points,
        worst_first=first,
        worst_second=second,
        worst_critical=crit,
    )


@dataclass(frozen=True)
class MapIdentityReport:
    points: int
    max_lift_defect: float  # |F(x + 1) - F(x) - 1|
    max_relative_error: float  # closed-form f' against a central difference


def check_map_identities(m: CircleMap, xs: np.ndarray) -> MapIdentityReport:
    """Lift identity and f' against central differences with h = 1e-3 min(d_C, d_S).

    Points are snapped to the grid where x + 1 is exact in double precision;
    otherwise the rounding of x + 1 alone, amplified by f', exceeds 1e-12 near S.
    """
    xs = (np.mod(np.asarray(xs, dtype=float), 1.0) + 1.0) - 1.0
    h = 1e-3 * np.minimum(m.dC(xs), m.dS(xs))
    F = eval_map(m, xs, lift=True)
    F1 = eval_map(m, xs + 1.0, lift=True)
    fd = (eval_map(m, xs + h, lift=True) - eval_map(m, xs - h, lift=True)) / (2.0 * h)
    fp, _ = eval_derivatives(m, xs)
    return MapIdentityReport(
        points=int(xs.size),
        max_lift_defect=float(np.max(np.abs(F1 - F - 1.0))),
        max_relative_error=float(np.max(np.abs(fd - fp) / np.abs(fp))),
    )


# ---------- Constants ----------
@dataclass(frozen=True)
class ExperimentProfile:
    lam: float
    alpha: float
    N0: int
    delta: float
    sigma: float
    M0: int
    N1: int
    mode: Literal["paper", "practical"]
    L: float
    enlargement: float = 10.0

    @classmethod
    def paper(cls, L: float, N0: int, enlargement: float = 10.0) -> ExperimentProfile:
        lam, alpha = 1e-3, 1e-6
        return cls(
            lam=lam,
            alpha=alpha,
            N0=N0,
            delta=L ** (-alpha * N0),
            sigma=L ** (-1.0 / 6.0),
            M0=int(math.floor(2.0 * alpha * N0 / lam)),
            N1=int(math.floor(10.0 * alpha * N0)),
            mode="paper",
            L=L,
            enlargement=enlargement,
        )

    @classmethod
    def practical(
        cls,
        L: float,
        delta: float = 1e-2,
        sigma: float | None = None,
        M0: int = 5,
        N1: int = 8,
        lam: float = 1e-3,
        alpha: float = 1e-6,
        N0: int = 10,
        enlargement: float = 10.0,
    ) -> ExperimentProfile:
        sigma = L ** (-1.0 / 6.0) if sigma is None else sigma
        if not 0.0 < delta < sigma < 1.0:
            raise ValueError(f"need 0 < delta < sigma < 1, got delta={delta}, sigma={sigma}")
        if M0 < 1:
            raise ValueError(f"M0 must be >= 1, got {M0}")
        return cls(lam, alpha, N0, delta, sigma, M0, N1, "practical", L, enlargement)

    @property
    def sqrt_delta(self) -> float:
        return math.sqrt(self.delta)

    def log_L(self, x: float) -> float:
        return math.log(x) / math.log(self.L)
