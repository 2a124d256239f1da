"""Orbits with derivative bookkeeping, contraction radii and the two
empirical distortion/expansion checks.

Steps that come closer than ``promotion_threshold`` to the singular set are
evaluated with mpmath at 106 bits; iterates inside the exclusion radius
end the orbit (flag ``truncated``) instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Literal

import mpmath
import numpy as np

from .common.errors import OrbitHitsSet, SingularProximity, UndefinedAtStep
from .common.log import get_logger
from .map_core import CircleMap, ExperimentProfile

log = get_logger("orbit")

EXTENDED_BITS = 106
StepFlag = Literal["ok", "promoted", "truncated"]


@dataclass(frozen=True)
class PrecisionPolicy:
    working_precision: Literal["double", "extended"] = "double"
    singular_exclusion_radius: float = 1e-13
    promotion_threshold: float = 1e-8
    max_orbit_length: int = 1_000_000

    def check(self, profile: ExperimentProfile) -> None:
        if not self.singular_exclusion_radius < self.promotion_threshold < profile.sigma:
            raise ValueError(
                "need singular_exclusion_radius < promotion_threshold < sigma, got "
                f"{self.singular_exclusion_radius} / {self.promotion_threshold} / {profile.sigma}"
            )


@dataclass(frozen=True)
class OrbitRecord:
    points: np.ndarray
    # entry i = ln|(f^i)'(x_0)|
    log_deriv_prefix: np.ndarray
    dC: np.ndarray
    dS: np.ndarray
    flags: tuple[StepFlag, ...]

    @property
    def steps(self) -> int:
        return len(self.points) - 1

    @property
    def truncated(self) -> bool:
        return bool(self.flags) and self.flags[-1] == "truncated"


@dataclass(frozen=True)
class ContractionData:
    base_point: float
    # log_Dn[0] = +inf (D_0 is unconstrained); D_n underflows long before its log does
    log_Dn: np.ndarray
    # ln of sum_{i<n} d_i^{-1}; entry 0 is -inf
    log_di_inv_prefix: np.ndarray

    @property
    def Dn(self) -> np.ndarray:
        return np.exp(self.log_Dn)

    @property
    def di_inv_prefix(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_di_inv_prefix)


def _extended_step(m: CircleMap, x: float) -> tuple[float, float]:
    """(f(x) mod 1, ln|f'(x)|) at 106 bits."""
    with mpmath.workprec(EXTENDED_BITS):
        xm = mpmath.mpf(x)
        xr = mpmath.mpf(x % 1.0)
        v = mpmath.mpf(m.phi.constant_offset)
        d1 = mpmath.mpf(0)
        for k, (c, s) in enumerate(zip(m.phi.cosine_coefficients, m.phi.sine_coefficients), 1):
            w = 2 * mpmath.pi * k
            ct, st = mpmath.cos(w * xr), mpmath.sin(w * xr)
            v += c * ct + s * st
            d1 += w * (s * ct - c * st)
        if v == 0:
            raise SingularProximity(x, 0.0)
        F = xm + m.a + m.L * mpmath.log(abs(v))
        fp = 1 + m.L * d1 / v
        return float(F - mpmath.floor(F)), float(mpmath.log(abs(fp)))


def iterate_orbit(m: CircleMap, x0: float, n: int, policy: PrecisionPolicy | None = None) -> OrbitRecord:
    policy = policy or PrecisionPolicy()
    n = min(int(n), policy.max_orbit_length)
    x = float(x0) % 1.0
    ds = m.dS(x)
    if ds < policy.singular_exclusion_radius:
        raise SingularProximity(x, ds)
    always_extended = policy.working_precision == "extended"

    points = [x]
    logs = [0.0]
    dCs = [m.dC(x)]
    dSs = [ds]
    flags: list[StepFlag] = []
    for _ in range(n):
        promoted = always_extended or ds < policy.promotion_threshold
        try:
            if promoted:
                nxt, ld = _extended_step(m, x)
            else:
                F, fp, _ = m.lift_scalar(x)
                if fp == 0.0:
                    raise SingularProximity(x, 0.0)
                nxt, ld = F % 1.0, math.log(abs(fp))
        except (SingularProximity, ValueError):
            flags.append("truncated")
            break
        ds_next = m.dS(nxt)
        if ds_next < policy.singular_exclusion_radius or not math.isfinite(ld):
            flags.append("truncated")
            break
        flags.append("promoted" if promoted else "ok")
        x, ds = nxt, ds_next
        points.append(x)
        logs.append(logs[-1] + ld)
        dCs.append(m.dC(x))
        dSs.append(ds)
    else:
        flags.append("ok")
    if flags[-1] == "truncated":
        log.debug("orbit of {:.15g} truncated after {} steps", x0, len(points) - 1)
    # flags[i] describes the step taken from points[i]; the last entry marks the stop
    return OrbitRecord(
        points=np.array(points),
        log_deriv_prefix=np.array(logs),
        dC=np.array(dCs),
        dS=np.array(dSs),
        flags=tuple(flags),
    )


def advance(m: CircleMap, xs: np.ndarray, exclusion: float = 1e-13) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One vectorised step: (f(xs) mod 1, ln|f'(xs)|, ok-mask).

    Entries whose image lands inside the exclusion radius (or whose value is
    not finite) are flagged not-ok; callers reseed them.
    """
    F, av, fp = m.lift_array(xs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ld = np.log(np.abs(fp))
    nxt = np.mod(F, 1.0)
    ok = np.isfinite(F) & np.isfinite(ld) & (av >= m.phi_floor)
    ok &= m.dS(np.where(ok, nxt, 0.25)) >= exclusion
    return np.where(ok, nxt, 0.0), np.where(ok, ld, 0.0), ok


def log_derivative_many(m: CircleMap, xs: np.ndarray, n: int, exclusion: float = 1e-13):
    """ln|(f^n)'| and lifted f^n for many starting points (double precision)."""
    x = np.asarray(xs, dtype=float).copy()
    lift = x.copy()
    total = np.zeros_like(x)
    for _ in range(n):
        F, av, fp = m.lift_array(np.mod(x, 1.0))
        if np.any(av < m.phi_floor) or np.any(fp == 0.0):
            raise OrbitHitsSet("sampled point hits C or S")
        total += np.log(np.abs(fp))
        lift = lift + (F - np.mod(x, 1.0))
        x = F
        if np.any(m.dS(np.mod(x, 1.0)) < exclusion):
            raise OrbitHitsSet("sampled orbit enters the exclusion radius")
    return total, lift


def compute_contraction(m: CircleMap, orbit: OrbitRecord, n_max: int) -> ContractionData:
    """D_n(x) = L^{-1/2} (sum_{i<n} d_i^{-1})^{-1}, d_i = d_C d_S / |(f^i)'|, in log space."""
    if orbit.steps < n_max - 1:
        raise ValueError(f"orbit has {orbit.steps} steps, need {n_max - 1}")
    dd = orbit.dC[:n_max] * orbit.dS[:n_max]
    bad = np.flatnonzero(dd < 1e-24)
    if bad.size:
        raise UndefinedAtStep(int(bad[0]))
    log_inv = orbit.log_deriv_prefix[:n_max] - np.log(dd)
    prefix = np.concatenate(([-np.inf], np.logaddexp.accumulate(log_inv)))
    log_D = -0.5 * math.log(m.L) - prefix
    return ContractionData(
        base_point=float(orbit.points[0]),
        log_Dn=log_D,
        log_di_inv_prefix=prefix,
    )


# ---------- Empirical checks ----------
@dataclass(frozen=True)
class DistortionReport:
    x: float
    n: int
    Dn: float
    max_ratio: float
    max_refined: float
    passed: bool


def check_distortion(
    m: CircleMap,
    x: float,
    n: int,
    samples: int,
    rng: np.random.Generator | None = None,
    tol: float = 1e-9,
) -> DistortionReport:
    """Sample pairs in [x - D_n, x + D_n] and bound |(f^n)'xi| / |(f^n)'eta|."""
    rng = rng or np.random.default_rng(0)
    orbit = iterate_orbit(m, x, n)
    if orbit.truncated or orbit.steps < n:
        raise OrbitHitsSet(f"orbit of {x} does not survive {n} steps")
    cd = compute_contraction(m, orbit, n)
    D = float(cd.Dn[n])
    base_log = float(orbit.log_deriv_prefix[n])
    xi = x + D * rng.uniform(-1.0, 1.0, samples)
    eta = x + D * rng.uniform(-1.0, 1.0, samples)
    lxi, fxi = log_derivative_many(m, xi, n)
    leta, feta = log_derivative_many(m, eta, n)
    ratio = np.exp(lxi - leta)
    sep = np.abs(np.mod(fxi - feta + 0.5, 1.0) - 0.5)
    moved = sep > 0.0
    refined = np.zeros_like(ratio)
    refined[moved] = np.abs(ratio[moved] - 1.0) * D * math.exp(base_log) / sep[moved]
    max_ratio = float(np.max(np.maximum(ratio, 1.0 / ratio)))
    return DistortionReport(
        x=float(x),
        n=n,
        Dn=D,
        max_ratio=max_ratio,
        max_refined=float(np.max(refined)) if refined.size else 0.0,
        passed=max_ratio <= 2.0 * (1.0 + tol),
    )


@dataclass(frozen=True)
class ExpansionReport:
    trials: int
    checked: int
    violations: int
    violation_rate: float
    # min over checks of (ln|(f^n)'| - ln bound) / ln L; negative means violated
    worst_margin: float


def check_expansion_outside(
    m: CircleMap,
    profile: ExperimentProfile,
    trials: int,
    rng: np.random.Generator | None = None,
    max_steps: int = 200,
) -> ExpansionReport:
    """Outside C_delta: |(f^n)'| >= delta L^{2 lam n}; on entry >= L^{2 lam n}."""
    rng = rng or np.random.default_rng(0)
    lnL, delta = math.log(m.L), profile.delta
    violations = checked = 0
    worst = math.inf
    drawn = 0
    while drawn < trials:
        x0 = float(rng.uniform())
        if m.dC(x0) <= delta or m.dS(x0) < 1e-9:
            continue
        drawn += 1
        orbit = iterate_orbit(m, x0, max_steps)
        inside = np.flatnonzero(orbit.dC[1:] < delta)
        entry = int(inside[0]) + 1 if inside.size else None
        last = entry if entry is not None else orbit.steps
        if last < 1:
            continue
        ns = np.arange(1, last + 1)
        P = orbit.log_deriv_prefix[1 : last + 1]
        bound = math.log(delta) + 2.0 * profile.lam * ns * lnL
        margins = list((P - bound) / lnL)
        if entry is not None:
            margins.append((P[-1] - 2.0 * profile.lam * entry * lnL) / lnL)
        checked += 1
        w = min(margins)
        worst = min(worst, w)
        if w < 0:
            violations += 1
    return ExpansionReport(
        trials=trials,
        checked=checked,
        violations=violations,
        violation_rate=violations / checked if checked else 0.0,
        worst_margin=worst if checked else math.nan,
    )


def deep_return_expansion(m: CircleMap, orbit: OrbitRecord, nu: int) -> float:
    """|(f^nu)'x| D_nu(x) / sqrt(d_C(f^nu x)) at a deep return nu; at least 1 expected."""
    if not 0 < nu <= orbit.steps:
        raise ValueError(f"nu = {nu} outside 1..{orbit.steps}")
    cd = compute_contraction(m, orbit, nu)
    log_ratio = orbit.log_deriv_prefix[nu] + cd.log_Dn[nu] - 0.5 * math.log(orbit.dC[nu])
    return math.exp(min(max(float(log_ratio), -700.0), 700.0))
