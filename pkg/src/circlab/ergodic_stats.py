"""Statistical properties of the map: the acim (two ways), Lyapunov exponent,
decay of correlations, CLT, coboundary tests and the entropy identity.

Sampling is batched through ``orbit_engine.advance``; independent batches
fan out with joblib, each on its own SeedSequence child so results do not
depend on the number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math
from typing import Literal, Sequence

from joblib import Parallel, delayed
import mpmath
import numpy as np
from scipy import sparse
from scipy.optimize import brentq
from scipy.stats import kstest, linregress

from .common.errors import (
    DivergentIntegral,
    EmptyBall,
    InsufficientData,
    NegativeVarianceEstimate,
    NoiseDominated,
    NonConvergence,
)
from .common.log import get_logger
from .inducing import Branch, InducedMarkovMap, lift_iterate, pullback_mass, quad_interp, systematic_thin
from .map_core import TWO_PI, CircleMap, ExperimentProfile
from .orbit_engine import advance, compute_contraction, iterate_orbit

log = get_logger("stats")

CHUNK = 250


# ---------- Observables ----------
@dataclass(frozen=True)
class Observable:
    """c0 + sum_k [a_k cos(2 pi k x) + b_k sin(2 pi k x)]."""

    cosine_coeffs: tuple[float, ...] = ()
    sine_coeffs: tuple[float, ...] = ()
    constant: float = 0.0
    holder_exponent: float = 1.0

    @classmethod
    def cosine(cls, amplitude: float = 1.0) -> Observable:
        return cls(cosine_coeffs=(amplitude,))

    @property
    def is_constant(self) -> bool:
        return not any(self.cosine_coeffs) and not any(self.sine_coeffs)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, self.constant)
        for k, a in enumerate(self.cosine_coeffs, 1):
            out = out + a * np.cos(TWO_PI * k * x)
        for k, b in enumerate(self.sine_coeffs, 1):
            out = out + b * np.sin(TWO_PI * k * x)
        return out

    __call__ = evaluate

    def bin_averages(self, bins: int) -> np.ndarray:
        """Exact averages over [j/bins, (j+1)/bins)."""
        e = np.arange(bins + 1) / bins
        out = np.full(bins, self.constant)
        for k, a in enumerate(self.cosine_coeffs, 1):
            w = TWO_PI * k
            out = out + a * np.diff(np.sin(w * e)) / w * bins
        for k, b in enumerate(self.sine_coeffs, 1):
            w = TWO_PI * k
            out = out - b * np.diff(np.cos(w * e)) / w * bins
        return out

    def mean(self, mu: EmpiricalMeasure) -> float:
        return float(np.dot(mu.bin_masses, self.bin_averages(mu.bin_count)))

    def centered(self, mu: EmpiricalMeasure) -> Observable:
        return replace(self, constant=self.constant - self.mean(mu))


@dataclass(frozen=True)
class CoboundaryObservable:
    """phi = psi o f - psi, with psi a trigonometric polynomial."""

    m: CircleMap
    psi: Observable
    offset: float = 0.0
    holder_exponent: float = 1.0

    @property
    def is_constant(self) -> bool:
        return self.psi.is_constant

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        F, _, _ = self.m.lift_array(x)
        return self.psi.evaluate(F) - self.psi.evaluate(x) + self.offset

    __call__ = evaluate

    def mean(self, mu: EmpiricalMeasure, per_bin: int = 16) -> float:
        k = mu.bin_count
        xs = (np.arange(k)[:, None] + (np.arange(per_bin)[None, :] + 0.5) / per_bin) / k
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = self.evaluate(xs)
        vals = np.where(np.isfinite(vals), vals, 0.0)
        return float(np.dot(mu.bin_masses, vals.mean(axis=1)))

    def centered(self, mu: EmpiricalMeasure) -> CoboundaryObservable:
        return replace(self, offset=self.offset - self.mean(mu))


ObservableLike = Observable | CoboundaryObservable


def coboundary_of(m: CircleMap, psi: Observable) -> CoboundaryObservable:
    return CoboundaryObservable(m=m, psi=psi)


# ---------- Measures ----------
@dataclass(frozen=True)
class EmpiricalMeasure:
    bin_count: int
    bin_masses: np.ndarray
    source: Literal["birkhoff", "induced"]

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.bin_count + 1) / self.bin_count

    @property
    def density(self) -> np.ndarray:
        return self.bin_masses * self.bin_count

    def density_at(self, x: float) -> float:
        return float(self.density[int((x % 1.0) * self.bin_count) % self.bin_count])

    def tv_distance(self, other: EmpiricalMeasure) -> float:
        a, b = self.bin_masses, other.bin_masses
        if self.bin_count != other.bin_count:
            k = math.gcd(self.bin_count, other.bin_count)
            a = a.reshape(k, -1).sum(axis=1)
            b = b.reshape(k, -1).sum(axis=1)
        return 0.5 * float(np.sum(np.abs(a - b)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        j = rng.choice(self.bin_count, size=n, p=self.bin_masses)
        return (j + rng.uniform(size=n)) / self.bin_count


@dataclass(frozen=True)
class InducedInvariantMeasure:
    ulam_bins: int
    # density of nu for F with respect to Lebesgue, per bin
    stationary_density: np.ndarray
    mean_return_time: float
    residual: float
    iterations: int
    # nu(omega) per branch, aligned with the map's branch list
    branch_masses: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    @property
    def density_bounds(self) -> tuple[float, float]:
        d = self.stationary_density[self.stationary_density > 0]
        return (float(d.min()), float(d.max())) if d.size else (0.0, 0.0)


def _seeds(seed, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def _birkhoff_chunk(m: CircleMap, n: int, orbit_len: int, burn_in: int, bins: int, ss, exclusion: float):
    rng = np.random.default_rng(ss)
    x = rng.uniform(size=n)
    age = np.zeros(n, dtype=int)
    hist = np.zeros(bins)
    log_sum, count = 0.0, 0
    for _ in range(orbit_len):
        nxt, ld, ok = advance(m, x, exclusion)
        use = ok & (age >= burn_in)
        log_sum += float(np.sum(ld[use]))
        count += int(np.count_nonzero(use))
        hist += np.bincount((nxt[use] * bins).astype(int) % bins, minlength=bins)
        age = np.where(ok, age + 1, 0)
        x = np.where(ok, nxt, rng.uniform(size=n))
    return hist, log_sum, count


def _run_birkhoff(m, n_orbits, orbit_len, burn_in, bins, seed, n_jobs, exclusion):
    if min(n_orbits, orbit_len, bins) <= 0 or not 0 <= burn_in < orbit_len:
        raise ValueError("need positive sizes and 0 <= burn_in < orbit_len")
    chunks = [min(CHUNK, n_orbits - i) for i in range(0, n_orbits, CHUNK)]
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_birkhoff_chunk)(m, k, orbit_len, burn_in, bins, ss, exclusion)
        for k, ss in zip(chunks, _seeds(seed, len(chunks)))
    )
    hist = np.sum([p[0] for p in parts], axis=0)
    return hist, sum(p[1] for p in parts), sum(p[2] for p in parts)


def estimate_acim_birkhoff(
    m: CircleMap,
    n_orbits: int,
    orbit_len: int,
    burn_in: int,
    bins: int,
    seed=0,
    *,
    n_jobs: int = 1,
    exclusion: float = 1e-13,
) -> EmpiricalMeasure:
    """Histogram of post-burn-in orbit points from uniform starts; truncated orbits are reseeded."""
    hist, _, count = _run_birkhoff(m, n_orbits, orbit_len, burn_in, bins, seed, n_jobs, exclusion)
    if count < 10_000:
        raise InsufficientData(f"only {count} orbit points survived")
    return EmpiricalMeasure(bins, hist / hist.sum(), "birkhoff")


def lyapunov_direct(
    m: CircleMap, n_orbits: int, orbit_len: int, burn_in: int, seed=0, *, n_jobs: int = 1
) -> float:
    """Birkhoff average of ln|f'| along orbits."""
    _, log_sum, count = _run_birkhoff(m, n_orbits, orbit_len, burn_in, 1, seed, n_jobs, 1e-13)
    if count == 0:
        raise InsufficientData("no orbit points survived")
    return log_sum / count


# ---------- Lyapunov exponent by quadrature ----------
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _log_abs_fp(m: CircleMap, x: np.ndarray) -> np.ndarray:
    _, _, fp = m.lift_array(x)
    with np.errstate(divide="ignore"):
        return np.log(np.abs(fp))


def _gauss(m: CircleMap, a: float, b: float) -> float:
    xs = a + (b - a) * (_GL_X + 1.0) / 2.0
    return 0.5 * (b - a) * float(np.dot(_GL_W, _log_abs_fp(m, xs)))


def _toward_singular(
    m: CircleMap, a: float, b: float, at_right: bool, tol: float, min_depth: int, max_depth: int
) -> float:
    """Integral of ln|f'| over [a, b] with a log singularity at one end, by dyadic panels."""
    length = b - a
    total = 0.0
    for j in range(max_depth):
        near, far = length / 2 ** (j + 1), length / 2**j
        lo, hi = (b - far, b - near) if at_right else (a + near, a + far)
        c = _gauss(m, lo, hi)
        total += c
        if j + 1 >= min_depth and abs(c) < tol * length:
            rest = (b - near, b) if at_right else (a, a + near)
            return total + _gauss(m, *rest)
    raise DivergentIntegral(f"no stabilisation on [{a:.6g}, {b:.6g}] after {max_depth} panels")


def bin_log_derivative_integrals(
    m: CircleMap, bins: int, *, tol: float = 1e-4, min_depth: int = 4, max_depth: int = 80
) -> np.ndarray:
    """int of ln|f'| over each bin; bins holding points of C or S are refined dyadically."""
    marks = np.sort(np.concatenate((m.critical.array, m.singular.array)))
    out = np.empty(bins)
    for j in range(bins):
        a, b = j / bins, (j + 1) / bins
        inside = marks[(marks > a) & (marks < b)]
        if inside.size == 0:
            out[j] = _gauss(m, a, b)
            continue
        edges = np.concatenate(([a], inside, [b]))
        total = 0.0
        for k, (u, v) in enumerate(zip(edges[:-1], edges[1:])):
            left, right = k > 0, k < len(edges) - 2
            if left and right:
                mid = 0.5 * (u + v)
                total += _toward_singular(m, u, mid, False, tol, min_depth, max_depth)
                total += _toward_singular(m, mid, v, True, tol, min_depth, max_depth)
            elif left or right:
                total += _toward_singular(m, u, v, right, tol, min_depth, max_depth)
            else:
                total += _gauss(m, u, v)
        out[j] = total
    return out


def lyapunov_exponent(
    m: CircleMap, mu: EmpiricalMeasure, *, tol: float = 1e-4, min_depth: int = 4, max_depth: int = 80
) -> float:
    """int ln|f'| d mu with mu piecewise constant on its bins."""
    integrals = bin_log_derivative_integrals(m, mu.bin_count, tol=tol, min_depth=min_depth, max_depth=max_depth)
    return float(np.dot(mu.density, integrals))


# ---------- Induced measure ----------
def _branch_targets(m: CircleMap, b: Branch, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Images under F of k domain-uniform sample points of a branch, with their weights."""
    ys = b.lap_lo + (b.lap_hi - b.lap_lo) * (np.arange(k) + 0.5) / k
    nodes = np.array([b.lap_lo, 0.5 * (b.lap_lo + b.lap_hi), b.lap_hi])
    P = quad_interp(nodes, b.hist_P, ys)
    rho = np.exp(-(P - P.min()))
    return np.mod(lift_iterate(m, ys, b.tail_step), 1.0), rho / rho.sum()


def ulam_matrix(m: CircleMap, imap: InducedMarkovMap, bins: int, samples_per_branch: int = 32) -> sparse.csr_matrix:
    """Row-stochastic Ulam matrix of F; bins holding no branch borrow the nearest row."""
    rows, cols, vals = [], [], []
    for b in imap.branches:
        dest, w = _branch_targets(m, b, samples_per_branch)
        ok = np.isfinite(dest)
        src = int((b.anchor % 1.0) * bins) % bins
        rows.append(np.full(int(ok.sum()), src))
        cols.append((dest[ok] * bins).astype(int) % bins)
        vals.append(b.weight * w[ok])
    P = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(bins, bins)
    ).tocsr()
    mass = np.asarray(P.sum(axis=1)).ravel()
    filled = np.flatnonzero(mass > 0)
    if filled.size == 0:
        raise InsufficientData("no branch carries mass")
    idx = np.arange(bins)
    gap = np.abs((idx[:, None] - filled[None, :] + bins // 2) % bins - bins // 2)
    source = filled[np.argmin(gap, axis=1)]
    P = P[source]
    return sparse.diags(1.0 / mass[source]) @ P


def _branch_rows(m: CircleMap, b: Branch) -> list[tuple[float, float, float, float, float]]:
    rows = list(b.trace[: b.return_time])
    if len(rows) < b.return_time and rows:
        lo, hi = rows[-1][0], rows[-1][1]
        y = np.array([lo, 0.5 * (lo + hi), hi])
        while len(rows) < b.return_time:
            y, _, _ = m.lift_array(y)
            if not np.all(np.isfinite(y)):
                break
            rows.append((float(np.min(y)), float(np.max(y)), 0.0, 0.0, 0.0))
    return rows


def _spread_row(hist: np.ndarray, row, mass: float) -> None:
    B = hist.size
    lo, hi, p0, p1, p2 = row
    shift = math.floor(lo)
    lo, hi = lo - shift, hi - shift
    if hi - lo > 4.0:
        hist += mass / B
        return
    if not hi > lo:
        hist[int(lo * B) % B] += mass
        return
    k0, k1 = math.floor(lo * B) + 1, math.ceil(hi * B) - 1
    edges = np.arange(k0, k1 + 1) / B
    pts = np.concatenate(([lo], edges, [hi]))
    G = pullback_mass(np.array([lo, 0.5 * (lo + hi), hi]), np.array([p0, p1, p2]), lo, pts)
    if not G[-1] > 0:
        return
    np.add.at(hist, np.arange(k0 - 1, k1 + 1) % B, mass * np.diff(G) / G[-1])


def estimate_acim_induced(
    imap: InducedMarkovMap,
    m: CircleMap,
    ulam_bins: int,
    *,
    mu_bins: int | None = None,
    samples_per_branch: int = 32,
    max_branches: int = 4096,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    seed=0,
) -> tuple[InducedInvariantMeasure, EmpiricalMeasure]:
    """Stationary density of F by Ulam power iteration, then mu by pushing nu forward R times."""
    if imap.total_mass <= 0.99:
        raise InsufficientData(f"induced map carries only {imap.total_mass:.4f} of the circle")
    P = ulam_matrix(m, imap, ulam_bins, samples_per_branch)
    PT = P.T.tocsr()
    pi = np.full(ulam_bins, 1.0 / ulam_bins)
    residual = math.inf
    it = 0
    while residual >= tol:
        it += 1
        if it > max_iter:
            raise NonConvergence(f"power iteration residual {residual:.3e} after {max_iter} steps")
        nxt = PT @ pi
        nxt /= nxt.sum()
        residual = float(np.abs(nxt - pi).sum())
        pi = nxt
    density = pi * ulam_bins

    src = np.array([int((b.anchor % 1.0) * ulam_bins) % ulam_bins for b in imap.branches])
    raw = np.array([b.weight for b in imap.branches]) * density[src]
    nu_mass = raw / raw.sum()
    R = np.array([b.return_time for b in imap.branches], dtype=float)
    mean_R = float(np.dot(nu_mass, R))
    nu = InducedInvariantMeasure(
        ulam_bins=ulam_bins,
        stationary_density=density,
        mean_return_time=mean_R,
        residual=residual,
        iterations=it,
        branch_masses=nu_mass,
    )

    bins = mu_bins or ulam_bins
    hist = np.zeros(bins)
    idx, w = systematic_thin(nu_mass, max_branches, np.random.default_rng(seed))
    for i, wi in zip(idx, w):
        for row in _branch_rows(m, imap.branches[i]):
            _spread_row(hist, row, float(wi))
    log.info("induced measure: {} power steps, mean return time {:.3f}", it, mean_R)
    return nu, EmpiricalMeasure(bins, hist / hist.sum(), "induced")


# ---------- Sampling under mu ----------
def mu_orbits(
    m: CircleMap, mu: EmpiricalMeasure, n_orbits: int, length: int, rng: np.random.Generator, exclusion: float = 1e-13
) -> np.ndarray:
    """(n_orbits, length) array of orbit points started from mu; failed orbits restart from mu."""
    X = np.empty((n_orbits, length))
    x = mu.sample(n_orbits, rng)
    for t in range(length):
        X[:, t] = x
        nxt, _, ok = advance(m, x, exclusion)
        if not ok.all():
            nxt[~ok] = mu.sample(int((~ok).sum()), rng)
        x = nxt
    return X


def birkhoff_sums(
    m: CircleMap, phi: ObservableLike, mu: EmpiricalMeasure, n: int, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """S_n phi for n_samples mu-distributed starts."""
    x = mu.sample(n_samples, rng)
    S = np.zeros(n_samples)
    for _ in range(n):
        S += phi.evaluate(x)
        nxt, _, ok = advance(m, x)
        if not ok.all():
            nxt[~ok] = mu.sample(int((~ok).sum()), rng)
        x = nxt
    return S


# ---------- Correlations ----------
@dataclass(frozen=True)
class CorrelationData:
    covariances: np.ndarray  # signed, n = 0..n_max
    noise_floor: float
    usable: int  # leading lags with |C_n| above the floor

    @property
    def correlations(self) -> np.ndarray:
        return np.abs(self.covariances)


@dataclass(frozen=True)
class CorrelationFit:
    tau: float
    constant: float
    r_squared: float
    data: CorrelationData


def correlation_sequence(
    m: CircleMap,
    phi: ObservableLike,
    psi: ObservableLike,
    mu: EmpiricalMeasure,
    n_max: int,
    samples: int,
    seed=0,
    *,
    noise_sigmas: float = 3.0,
    n_orbits: int = 100,
) -> CorrelationData:
    """Time-average estimates of Cov(phi o f^n, psi) for n = 0..n_max."""
    rng = np.random.default_rng(seed)
    T = max(1, int(samples) // n_orbits)
    X = mu_orbits(m, mu, n_orbits, T + n_max, rng)
    A, B = phi.evaluate(X), psi.evaluate(X)
    base = B[:, :T]
    cov = np.array(
        [np.mean(A[:, n : n + T] * base) - np.mean(A[:, n : n + T]) * np.mean(base) for n in range(n_max + 1)]
    )
    floor = noise_sigmas * float(np.std(A)) * float(np.std(B)) / math.sqrt(n_orbits * T)
    above = np.abs(cov) > floor
    usable = int(np.argmin(above)) if not above.all() else above.size
    return CorrelationData(covariances=cov, noise_floor=floor, usable=usable)


def correlation_decay(
    m: CircleMap,
    phi: ObservableLike,
    psi: ObservableLike,
    mu: EmpiricalMeasure,
    n_max: int,
    samples: int,
    seed=0,
    *,
    noise_sigmas: float = 3.0,
) -> CorrelationFit:
    """Fit C_n ~ K tau^n on the log scale over the lags above the noise floor."""
    data = correlation_sequence(m, phi, psi, mu, n_max, samples, seed, noise_sigmas=noise_sigmas)
    if data.usable < 5:
        raise NoiseDominated(f"only {data.usable} lag(s) above the noise floor {data.noise_floor:.3e}")
    n = np.arange(data.usable)
    fit = linregress(n, np.log(data.correlations[: data.usable]))
    return CorrelationFit(
        tau=math.exp(fit.slope), constant=math.exp(fit.intercept), r_squared=float(fit.rvalue**2), data=data
    )


# ---------- CLT ----------
@dataclass(frozen=True)
class CLTResult:
    sigma_squared: float
    ks_distance: float
    lag: int
    sample_variance: float  # (1/n) Var(S_n)
    values: np.ndarray = field(repr=False)


def green_kubo(data: CorrelationData) -> tuple[float, int]:
    """Var + 2 sum of covariances up to the last lag above the floor; clipped at -tol."""
    K = max(data.usable - 1, 0)
    s2 = float(data.covariances[0] + 2.0 * np.sum(data.covariances[1 : K + 1]))
    tol = (2 * K + 1) * data.noise_floor
    if s2 < -tol:
        raise NegativeVarianceEstimate(s2, K)
    return max(s2, 0.0), K


def clt_test(
    m: CircleMap,
    phi: ObservableLike,
    mu: EmpiricalMeasure,
    n: int,
    n_samples: int,
    seed=0,
    *,
    max_lag: int = 20,
    gk_samples: int = 1_000_000,
) -> CLTResult:
    """Green-Kubo variance and the KS distance of S_n / sqrt(n) to N(0, sigma^2)."""
    rng = np.random.default_rng(seed)
    values = birkhoff_sums(m, phi, mu, n, n_samples, rng) / math.sqrt(n)
    sample_var = float(np.var(values))
    if phi.is_constant:
        degenerate = float(np.max(np.abs(values))) < 1e-9
        return CLTResult(0.0, 0.0 if degenerate else 1.0, 0, sample_var, values)
    data = correlation_sequence(m, phi, phi, mu, max_lag, gk_samples, rng.integers(2**32))
    s2, K = green_kubo(data)
    if s2 > 0:
        ks = float(kstest(values, "norm", args=(0.0, math.sqrt(s2))).statistic)
    else:
        ks = 0.0 if float(np.max(np.abs(values))) < 1e-9 else 1.0
    log.debug("clt: sigma^2 = {:.5f} (lag {}), KS = {:.4f}", s2, K, ks)
    return CLTResult(s2, ks, K, sample_var, values)


def variance_growth(
    m: CircleMap, phi: ObservableLike, mu: EmpiricalMeasure, ns: Sequence[int], n_samples: int, seed=0
) -> dict[int, float]:
    """(1/n) Var(S_n) for each n."""
    rng = np.random.default_rng(seed)
    return {int(n): float(np.var(birkhoff_sums(m, phi, mu, int(n), n_samples, rng)) / n) for n in ns}


# ---------- Coboundary obstruction ----------
@dataclass(frozen=True)
class CoboundaryDiagnostic:
    periods: tuple[int, ...]
    # (1/p) sum of phi over each periodic orbit found
    orbit_averages: np.ndarray
    max_abs: float


def periodic_points(m: CircleMap, p: int, grid: int = 1 << 16, limit: int = 50) -> np.ndarray:
    """Up to ``limit`` points with f^p(x) = x, located by sign changes of the lifted f^p(x) - x."""
    xs = (np.arange(grid) + 0.5) / grid
    xs = xs[m.dS(xs) > 1e-9]
    H = lift_iterate(m, xs, p) - xs
    f0, f1 = np.floor(H[:-1]), np.floor(H[1:])
    cells = np.flatnonzero(np.isfinite(H[:-1]) & np.isfinite(H[1:]) & (f0 != f1) & (np.abs(H[1:] - H[:-1]) < 2.0))
    out = []
    for j in cells:
        level = max(f0[j], f1[j])

        def h(x: float) -> float:
            return float(lift_iterate(m, [x], p)[0]) - x - level

        try:
            r = brentq(h, xs[j], xs[j + 1], xtol=1e-15)
        except ValueError:
            continue
        if abs(h(r)) < 1e-8:
            out.append(r)
        if len(out) >= limit:
            break
    return np.array(out)


def coboundary_diagnostic(
    m: CircleMap, phi: ObservableLike, periods: Sequence[int] = (1, 2), *, grid: int = 1 << 16, limit: int = 50
) -> CoboundaryDiagnostic:
    """Periodic-orbit averages of phi: all vanish for a coboundary, generically O(1) otherwise."""
    avgs = []
    for p in periods:
        for x in periodic_points(m, p, grid, limit):
            y = np.array([x])
            total = 0.0
            for _ in range(p):
                total += float(phi.evaluate(y)[0])
                y = np.mod(lift_iterate(m, y, 1), 1.0)
            avgs.append(total / p)
    arr = np.array(avgs)
    return CoboundaryDiagnostic(tuple(periods), arr, float(np.max(np.abs(arr))) if arr.size else math.nan)


# ---------- Entropy ----------
@dataclass(frozen=True)
class EntropyReport:
    residual: float
    integral_log_F: float  # int ln|F'| d nu
    mean_return_time: float  # int R d nu, summed over branches
    lyapunov: float
    entropy: float  # integral_log_F / mean_return_time


def entropy_check(
    imap: InducedMarkovMap, nu: InducedInvariantMeasure, m: CircleMap, lyapunov: float
) -> EntropyReport:
    """Compare int ln|F'| d nu with (int R d nu) * lambda."""
    w = nu.branch_masses
    logF = np.array([(b.node_P[0] + 4.0 * b.node_P[1] + b.node_P[2]) / 6.0 for b in imap.branches])
    R = np.array([b.return_time for b in imap.branches], dtype=float)
    A = float(np.dot(w, logF))
    mean_R = float(np.dot(w, R))
    B = mean_R * lyapunov
    return EntropyReport(
        residual=abs(A - B) / abs(B), integral_log_F=A, mean_return_time=mean_R, lyapunov=lyapunov, entropy=A / mean_R
    )


# ---------- Local entropy probe ----------
def rho_beta(m: CircleMap, x: float, beta: float) -> float:
    """d_C(x) near C, d_S(x) near S, beta elsewhere."""
    dc, ds = float(m.dC(x)), float(m.dS(x))
    if dc <= beta:
        return dc
    if ds <= beta:
        return ds
    return beta


def _mp_lift(m: CircleMap, x):
    v = mpmath.mpf(m.phi.constant_offset)
    for k, (c, s) in enumerate(zip(m.phi.cosine_coefficients, m.phi.sine_coefficients), 1):
        t = 2 * mpmath.pi * k * x
        v += c * mpmath.cos(t) + s * mpmath.sin(t)
    return x + m.a + m.L * mpmath.log(abs(v))


@dataclass(frozen=True)
class ProbeResult:
    values: list[float]
    inclusion_checked: int
    inclusion_failures: int
    ball_sizes: list[float]


class _Tracker:
    """Does y follow x within rho_beta(f^i x) for i < n? Evaluated in mpmath."""

    def __init__(self, m: CircleMap, x: float, radii: Sequence[float], dps: int):
        self.m, self.radii, self.dps = m, list(radii), dps
        with mpmath.workdps(dps):
            self.orbit = [mpmath.mpf(x)]
            for _ in range(len(self.radii) - 1):
                self.orbit.append(_mp_lift(m, self.orbit[-1]))

    def tracks(self, offset) -> bool:
        with mpmath.workdps(self.dps):
            y = self.orbit[0] + offset
            for xi, r in zip(self.orbit, self.radii):
                if abs(y - xi) >= r:
                    return False
                y = _mp_lift(self.m, y)
            return True

    def reach(self, start, side: int, bisections: int = 60):
        """Distance to the tracking boundary on one side, by doubling and bisection."""
        with mpmath.workdps(self.dps):
            inside = mpmath.mpf(start)
            while not self.tracks(side * inside):
                inside /= 2
                if inside < mpmath.mpf(10) ** (-self.dps + 5):
                    return mpmath.mpf(0)
            outside = inside * 2
            while self.tracks(side * outside):
                inside, outside = outside, outside * 2
            for _ in range(bisections):
                mid = (inside + outside) / 2
                if self.tracks(side * mid):
                    inside = mid
                else:
                    outside = mid
            return inside


def local_entropy_probe(
    m: CircleMap,
    mu: EmpiricalMeasure,
    profile: ExperimentProfile,
    beta: float,
    x_samples: int,
    n: int,
    seed=0,
    *,
    check_points: int = 1000,
) -> ProbeResult:
    """-(1/n) ln mu(B(x, rho_beta; n)) at mu-sampled x, plus the beta * J_n(x) inclusion check."""
    if not 0.0 < beta < profile.delta:
        raise ValueError(f"beta must lie in (0, delta), got {beta}")
    if n == 0:
        return ProbeResult([], 0, 0, [])
    rng = np.random.default_rng(seed)
    values, sizes = [], []
    checked = failures = 0
    attempts = 0
    while len(values) < x_samples:
        attempts += 1
        if attempts > 100 * x_samples:
            raise EmptyBall("could not find usable sample points")
        x = float(mu.sample(1, rng)[0])
        if m.dC(x) < 1e-6 or m.dS(x) < 1e-6:
            continue
        orbit = iterate_orbit(m, x, n)
        if orbit.truncated or orbit.steps < n:
            continue
        log_D = float(compute_contraction(m, orbit, n).log_Dn[n])
        radii = [rho_beta(m, float(p), beta) for p in orbit.points[:n]]
        dps = 30 + int(max(float(orbit.log_deriv_prefix[n]), -log_D) / math.log(10.0))
        tracker = _Tracker(m, x, radii, dps)
        with mpmath.workdps(dps):
            half = beta * mpmath.exp(log_D)
            size = tracker.reach(half, 1) + tracker.reach(half, -1)
            for u in np.linspace(-1.0, 1.0, check_points + 2)[1:-1]:
                checked += 1
                if not tracker.tracks(half * mpmath.mpf(float(u))):
                    failures += 1
            if size == 0:
                raise EmptyBall(f"no point tracks {x:.12g} for {n} steps")
            density = mu.density_at(x)
            if density <= 0.0:
                raise EmptyBall(f"mu-hat vanishes at {x:.12g}")
            log_size = float(mpmath.log(size))
        sizes.append(log_size)
        values.append(-(math.log(density) + log_size) / n)
    return ProbeResult(values, checked, failures, sizes)


# ---------- Report ----------
@dataclass(frozen=True)
class StatReport:
    lyapunov: float
    correlation_fit: tuple[float, float, float] | None
    clt: tuple[float, float]
    entropy_residual: float
    local_entropy_samples: list[float]
    notes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lyapunov": self.lyapunov,
            "correlation_fit": None
            if self.correlation_fit is None
            else dict(zip(("tau", "constant", "r_squared"), self.correlation_fit)),
            "clt": {"sigma_squared": self.clt[0], "ks_distance": self.clt[1]},
            "entropy_residual": self.entropy_residual,
            "local_entropy_samples": list(self.local_entropy_samples),
            "notes": dict(self.notes),
        }
