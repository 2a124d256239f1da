"""Experiment orchestration: turn a config into objects, run tasks, write reports.

Each task records named checks; a failed check or a domain error lands in the
machine-readable failure list and the remaining tasks still run.
"""

from __future__ import annotations

from dataclasses import replace
from functools import cached_property
import math
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .assumptions import check_dynamical_assumptions, checker_profile, sweep_parameters
from .common.errors import CirclabError, NoiseDominated, OutOfBindingRange
from .common.fs import prepare_output_dir
from .common.log import get_logger
from .common.settings import TASKS, ExperimentConfig
from .ergodic_stats import (
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
    local_entropy_probe,
    lyapunov_direct,
    lyapunov_exponent,
    variance_growth,
)
from .inducing import (
    build_full_return_map,
    build_stopping_partition,
    expansion_violations,
    tail_fit,
    tail_statistics,
)
from .map_core import (
    CircleMap,
    ExperimentProfile,
    PhiSpec,
    check_map_identities,
    eval_map,
    fit_derivative_bounds,
    verify_derivative_bounds,
)
from .orbit_engine import PrecisionPolicy, check_distortion, check_expansion_outside, iterate_orbit
from . import reports
from .return_structure import build_all_bindings, classify_returns, decompose_orbit

log = get_logger("experiment")

# independent random stream per task
_STREAMS = {"verify-map": 1, "partition": 2, "induce": 3, "stats": 4, "entropy": 5, "clt": 6, "sweep": 7}
ORDER = ("verify-map", "partition", "induce", "stats", "entropy", "clt", "sweep")
# psi of the explicit coboundary psi o f - psi checked by the clt task
COBOUNDARY_PSI = Observable.cosine(0.1)


# ---------- Config -> objects ----------
def build_map(cfg: ExperimentConfig, L: float | None = None) -> CircleMap:
    mc = cfg.map
    phi = PhiSpec(
        cosine_coefficients=tuple(mc.cosine_coefficients),
        sine_coefficients=tuple(mc.sine_coefficients),
        constant_offset=mc.constant_offset,
    )
    return CircleMap(a=mc.a, L=mc.L if L is None else L, phi=phi, grid_points=mc.grid_points)


def build_profile(cfg: ExperimentConfig, L: float | None = None) -> ExperimentProfile:
    p = cfg.profile
    L = cfg.map.L if L is None else L
    if p.mode == "paper":
        return ExperimentProfile.paper(L, p.N0, p.enlargement)
    return ExperimentProfile.practical(
        L,
        delta=p.delta,
        sigma=p.sigma if p.sigma > 0 else None,
        M0=p.M0,
        N1=p.N1,
        lam=p.lam,
        alpha=p.alpha,
        N0=p.N0,
        enlargement=p.enlargement,
    )


def build_policy(cfg: ExperimentConfig) -> PrecisionPolicy:
    pc = cfg.precision
    return PrecisionPolicy(
        working_precision=pc.working_precision,
        singular_exclusion_radius=pc.singular_exclusion_radius,
        promotion_threshold=pc.promotion_threshold,
        max_orbit_length=pc.max_orbit_length,
    )


def _median(values: list[float]) -> float:
    return float(np.median(values)) if values else math.nan


class Lab:
    """Shared state of one run; expensive objects are built once and reused across tasks."""

    def __init__(self, cfg: ExperimentConfig, bundle: reports.ReportBundle) -> None:
        self.cfg = cfg
        self.bundle = bundle
        self.results: dict[str, Any] = {}
        self.notes: dict[str, str] = {}
        self._cache: dict[str, tuple[Any, CirclabError | None]] = {}

    # ----- shared objects -----
    @cached_property
    def m(self) -> CircleMap:
        return build_map(self.cfg)

    @cached_property
    def profile(self) -> ExperimentProfile:
        return build_profile(self.cfg)

    @cached_property
    def policy(self) -> PrecisionPolicy:
        policy = build_policy(self.cfg)
        policy.check(self.profile)
        return policy

    @cached_property
    def bounds(self):
        return fit_derivative_bounds(self.m, self.cfg.map.grid_points)

    @cached_property
    def bindings(self):
        return build_all_bindings(self.m, self.bounds, self.cfg.run.inducing.p_max, self.policy)

    def _once(self, key: str, build: Callable[[], Any]) -> Any:
        """Build once; a failure is remembered and re-raised instead of rebuilt."""
        if key not in self._cache:
            try:
                self._cache[key] = (build(), None)
            except CirclabError as e:
                self._cache[key] = (None, e)
        value, error = self._cache[key]
        if error is not None:
            raise error
        return value

    @property
    def imap(self):
        inducing = self.cfg.run.inducing
        return self._once(
            "imap",
            lambda: build_full_return_map(
                self.m,
                self.profile,
                self.bindings,
                inducing.mass_target,
                inducing,
                bounds=self.bounds,
                rng=self.rng("induce"),
            ),
        )

    @property
    def mu_birkhoff(self):
        s = self.cfg.run.stats
        return self._once(
            "mu_birkhoff",
            lambda: estimate_acim_birkhoff(
                self.m, s.n_orbits, s.orbit_len, s.burn_in, s.bins, self.seed("stats"), n_jobs=self.cfg.run.n_jobs
            ),
        )

    @property
    def induced(self):
        s = self.cfg.run.stats
        return self._once(
            "induced",
            lambda: estimate_acim_induced(self.imap, self.m, s.ulam_bins, mu_bins=s.bins, seed=self.seed("stats")),
        )

    @cached_property
    def lyapunov(self) -> float:
        return lyapunov_exponent(self.m, self.mu_birkhoff)

    def seed(self, task: str) -> int:
        ss = np.random.SeedSequence((self.cfg.run.seed, _STREAMS[task]))
        return int(ss.generate_state(1)[0])

    def rng(self, task: str) -> np.random.Generator:
        return np.random.default_rng(self.seed(task))

    def path(self, name: str) -> Path:
        return self.bundle.directory / name

    # ----- bookkeeping -----
    def check(self, task: str, name: str, value: Any, passed: bool, threshold: Any = None) -> bool:
        entry = {"name": name, "value": value, "threshold": threshold, "passed": bool(passed)}
        self.results.setdefault(task, {}).setdefault("checks", []).append(entry)
        if not passed:
            self.bundle.failures.append({"task": task, "check": name, "value": value, "threshold": threshold})
            log.info("{}: check {} failed ({} vs {})", task, name, value, threshold)
        return bool(passed)

    def record(self, task: str, **values: Any) -> None:
        self.results.setdefault(task, {}).update(values)

    # ----- tasks -----
    def verify_map(self) -> None:
        t = "verify-map"
        m, rng = self.m, self.rng(t)
        m.phi.certify(self.cfg.map.grid_points)
        self.record(t, critical_points=list(m.critical.points), singular_points=list(m.singular.points))

        xs = rng.uniform(size=40_000)
        xs = xs[(m.dC(xs) > 1e-3) & (m.dS(xs) > 1e-3)][:10_000]
        ident = check_map_identities(m, xs)
        self.record(t, identities=ident)
        self.check(t, "lift_identity", ident.max_lift_defect, ident.max_lift_defect < 1e-12, 1e-12)
        self.check(t, "derivative_agreement", ident.max_relative_error, ident.max_relative_error < 1e-6, 1e-6)

        for L in (100.0, 1000.0):
            mL = build_map(self.cfg, L)
            b = fit_derivative_bounds(mL, 10_000)
            res = verify_derivative_bounds(mL, b, 100_000)
            self.record(t, **{f"bounds_L{L:g}": {"K0": b.K0, "eps0": b.eps0, "check": res}})
            self.check(t, f"derivative_bounds_L{L:g}", res.passed, res.passed, True)

        configs = passes = attempts = 0
        while configs < 100:
            x, n = float(rng.uniform()), int(rng.integers(1, 21))
            try:
                rep = check_distortion(m, x, n, 1000, rng)
            except ArithmeticError:
                attempts += 1
                if attempts > 10_000:
                    raise
                continue
            configs += 1
            passes += rep.passed
        self.check(t, "distortion_fraction", passes / configs, passes / configs >= 0.95, 0.95)

        exp = check_expansion_outside(m, self.profile, 200, rng)
        self.record(t, expansion=exp)

        verdict = check_dynamical_assumptions(
            m, checker_profile(self.profile, self.cfg.run.sweep.sigma or None), self.cfg.run.sweep.horizon, self.policy
        )
        self.record(t, assumptions=verdict)

        c = m.critical.points[0]
        orbit = iterate_orbit(m, eval_map(m, c), 1000, self.policy)
        self.bundle.add(reports.write_orbit_dump(self.path("critical_orbit.csv"), orbit))
        try:
            d = classify_returns(decompose_orbit(m, orbit, self.profile, self.bindings))
        except OutOfBindingRange as e:
            self.notes["decomposition"] = str(e)
        else:
            self.bundle.add(reports.write_decomposition(self.path("critical_returns.csv"), d))
            self.record(t, free_returns=len(d.events), clamped=sum(e.clamped for e in d.events))

    def partition(self) -> None:
        t = "partition"
        ind, prof = self.cfg.run.inducing, self.profile
        rng = self.rng(t)
        k = ind.partition_intervals
        counts: dict[int, float] = {}
        unresolved = base = 0.0
        short = violations = 0
        for j in range(k):
            lo = j / k
            part = build_stopping_partition(
                self.m, (lo, lo + prof.delta), prof, self.bindings, ind.max_steps,
                population=ind.population, resolution=ind.resolution, rng=rng, p_max=ind.p_max,
            )
            for n, v in part.tail_counts.items():
                counts[n] = counts.get(n, 0.0) + v
            unresolved += part.unresolved_measure
            base += part.base_weight
            short += sum(e.image_length < prof.sqrt_delta * (1.0 - 1e-9) for e in part.elements)
            violations += expansion_violations(part, prof)
        fit = tail_fit(counts)
        self.record(t, tail_counts=counts, tail_fit=fit, unresolved=unresolved, base=base)
        self.check(t, "large_scale_images", short, short == 0, 0)
        self.check(t, "expansion_at_stop", violations, violations == 0, 0)
        self.check(t, "unresolved_fraction", unresolved / base, unresolved / base < 1e-3, 1e-3)
        self.check(t, "tail_slope", fit[0], fit[0] < 0, 0.0)
        self.check(t, "tail_r_squared", fit[2], fit[2] >= 0.9, 0.9)
        self.bundle.add(reports.write_tail(self.path("partition_tail.csv"), counts))
        self.bundle.add(reports.plot_tail(self.path("partition_tail.svg"), counts, fit))

    def induce(self) -> None:
        t = "induce"
        imap = self.imap
        counts, fit = tail_statistics(imap)
        defect = max(imap.coverage_defect, default=0.0)
        self.record(
            t,
            branches=len(imap.branches),
            total_mass=imap.total_mass,
            unresolved=imap.unresolved_measure,
            stages=imap.stages,
            mean_return_time=imap.mean_return_time,
            distortion_constant=imap.distortion_constant,
            tail_fit=fit,
        )
        target = self.cfg.run.inducing.mass_target
        self.check(t, "total_mass", imap.total_mass, imap.total_mass >= target, target)
        self.check(t, "endpoint_defect", defect, defect < 1e-6, 1e-6)
        self.check(t, "max_gap", imap.max_gap, imap.max_gap < 1e-3, 1e-3)
        self.check(t, "injective", imap.injective, imap.injective, True)
        self.check(t, "return_tail_slope", fit[0], fit[0] < 0, 0.0)
        self.bundle.add(reports.write_branches(self.path("branches.csv"), imap))
        self.bundle.add(reports.write_tail(self.path("return_tail.csv"), counts))
        self.bundle.add(reports.plot_tail(self.path("return_tail.svg"), counts, fit))

    def stats(self) -> None:
        t = "stats"
        s, m = self.cfg.run.stats, self.m
        seed = self.seed(t)
        mu = self.mu_birkhoff
        lowest = float(np.min(mu.bin_masses))
        self.check(t, "positive_bins", lowest, lowest > 0.0, 0.0)

        lam = self.lyapunov
        direct = lyapunov_direct(m, 100, 2000, s.burn_in, seed, n_jobs=self.cfg.run.n_jobs)
        self.record(t, lyapunov=lam, lyapunov_direct=direct)
        self.check(t, "lyapunov_positive", lam, lam > 0.0, 0.0)

        phi = Observable.cosine()
        try:
            fit = correlation_decay(
                m, phi, phi, mu, s.corr_n_max, s.corr_samples, seed, noise_sigmas=s.noise_sigmas
            )
        except NoiseDominated as e:
            self.notes["correlations"] = str(e)
            fit = None
            data = correlation_sequence(
                m, phi, phi, mu, s.corr_n_max, s.corr_samples, seed, noise_sigmas=s.noise_sigmas
            )
        else:
            data = fit.data
            self.record(t, correlation_fit={"tau": fit.tau, "constant": fit.constant, "r_squared": fit.r_squared})
            self.check(t, "tau_in_unit_interval", fit.tau, 0.0 < fit.tau < 1.0, [0.0, 1.0])
            self.check(t, "tau_r_squared", fit.r_squared, fit.r_squared >= 0.8, 0.8)
        self.bundle.add(reports.write_correlations(self.path("correlations.csv"), data))
        self.bundle.add(reports.plot_correlations(self.path("correlations.svg"), data, fit))

        probe = local_entropy_probe(m, mu, self.profile, s.beta, s.probe_points, s.probe_n, seed)
        med = _median(probe.values)
        rel = abs(med - lam) / lam
        self.record(t, local_entropy=probe.values, local_entropy_median=med)
        self.check(t, "inclusion_failures", probe.inclusion_failures, probe.inclusion_failures == 0, 0)
        self.check(t, "local_entropy_vs_lyapunov", rel, rel <= 0.15, 0.15)

        # needs the induced map; last so the Birkhoff checks above survive its failure
        nu, mu_ind = self.induced
        tv = mu.tv_distance(mu_ind)
        self.check(t, "acim_tv_distance", tv, tv < 0.1, 0.1)
        self.record(t, induced_min_bin=float(np.min(mu_ind.bin_masses)), ulam_residual=nu.residual)
        self.bundle.add(reports.plot_densities(self.path("density.svg"), {"birkhoff": mu, "induced": mu_ind}))
        self.bundle.add(
            reports.write_csv(
                self.path("density.csv"),
                ("bin", "birkhoff", "induced"),
                zip(range(mu.bin_count), mu.density, mu_ind.density),
            )
        )

    def entropy(self) -> None:
        t = "entropy"
        nu, _ = self.induced
        rep = entropy_check(self.imap, nu, self.m, self.lyapunov)
        self.record(t, report=rep)
        self.check(t, "entropy_residual", rep.residual, rep.residual <= 0.02, 0.02)

    def clt(self) -> None:
        t = "clt"
        s, m, mu = self.cfg.run.stats, self.m, self.mu_birkhoff
        phi = Observable.cosine()
        res = clt_test(
            m, phi, mu, s.clt_n, s.clt_samples, self.seed(t), max_lag=s.corr_n_max, gk_samples=s.corr_samples
        )
        self.record(
            t,
            sigma_squared=res.sigma_squared,
            ks_distance=res.ks_distance,
            lag=res.lag,
            sample_variance=res.sample_variance,
        )
        self.check(t, "sigma_squared_positive", res.sigma_squared, res.sigma_squared > 0.0, 0.0)
        self.check(t, "ks_distance", res.ks_distance, res.ks_distance < s.ks_threshold, s.ks_threshold)
        self.bundle.add(reports.write_samples(self.path("clt_samples.csv"), res.values, "normalised_sum"))
        self.bundle.add(reports.plot_clt(self.path("clt.svg"), res.values, res.sigma_squared))

        cob = coboundary_of(m, COBOUNDARY_PSI)
        growth = variance_growth(m, cob, mu, s.coboundary_ns, s.coboundary_samples, self.seed(t))
        vals = [growth[n] for n in sorted(growth)]
        self.record(t, coboundary_variance=growth)
        self.check(t, "coboundary_variance_decreasing", vals, all(b < a for a, b in zip(vals, vals[1:])), "decreasing")

        self.record(
            t,
            periodic_obstruction={
                "observable": coboundary_diagnostic(m, phi).max_abs,
                "coboundary": coboundary_diagnostic(m, cob).max_abs,
            },
        )

    def sweep(self) -> None:
        t = "sweep"
        sw = self.cfg.run.sweep

        def profile_for(L: float) -> ExperimentProfile:
            return checker_profile(build_profile(self.cfg, L), sw.sigma or None)

        res = sweep_parameters(
            self.m, sw.a_grid, sw.L_values, profile_for, sw.horizon, n_jobs=self.cfg.run.n_jobs, policy=self.policy
        )
        self.record(t, label=res.label, horizon=res.horizon, rows=[
            {"L": r.L, "accepted": r.accepted, "total": r.total, "fraction": r.fraction, "histogram": r.histogram}
            for r in res.rows
        ])
        if len(res.rows) >= 2:
            lo = min(res.rows, key=lambda r: r.L)
            hi = max(res.rows, key=lambda r: r.L)
            slack = 1.0 / sw.a_grid
            trend = [lo.fraction, hi.fraction]
            self.check(t, "accepted_fraction_trend", trend, hi.fraction >= lo.fraction - slack, slack)
        self.bundle.add(reports.write_sweep(self.path("sweep.csv"), res))
        self.bundle.add(reports.plot_sweep(self.path("sweep.svg"), res))

    def stat_report(self) -> StatReport | None:
        """Combined statistics record; None unless stats, entropy and clt all finished."""
        st, ent, clt = (self.results.get(t, {}) for t in ("stats", "entropy", "clt"))
        if "local_entropy" not in st or "report" not in ent or "ks_distance" not in clt:
            return None
        fit = st.get("correlation_fit")
        return StatReport(
            lyapunov=st["lyapunov"],
            correlation_fit=None if fit is None else (fit["tau"], fit["constant"], fit["r_squared"]),
            clt=(clt["sigma_squared"], clt["ks_distance"]),
            entropy_residual=ent["report"].residual,
            local_entropy_samples=list(st["local_entropy"]),
            notes=dict(self.notes),
        )

    def runner(self, task: str) -> Callable[[], None]:
        return getattr(self, task.replace("-", "_"))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> reports.ReportBundle:
    """Run the configured task(s) and write summary.json plus per-task CSV/SVG files."""
    if cfg.run.task not in TASKS:
        raise ValueError(f"unknown task {cfg.run.task!r}")
    directory = prepare_output_dir(out_dir or cfg.run.output_dir)
    bundle = reports.ReportBundle(directory)
    lab = Lab(cfg, bundle)
    tasks = ORDER if cfg.run.task == "all" else (cfg.run.task,)
    for task in tasks:
        log.info("task {} ...", task)
        try:
            lab.runner(task)()
        except CirclabError as e:
            log.info("task {} failed: {}", task, e)
            bundle.failures.append({"task": task, "error": type(e).__name__, "message": str(e)})
    results: dict[str, Any] = {**lab.results, "notes": lab.notes}
    report = lab.stat_report()
    if report is not None:
        results["report"] = report.to_dict()
    reports.write_summary(bundle, cfg, results)
    log.info("{} file(s) in {}; {} failure(s)", len(bundle.files), directory, len(bundle.failures))
    return bundle


def with_overrides(
    cfg: ExperimentConfig,
    *,
    task: str | None = None,
    seed: int | None = None,
    out: str | None = None,
    profile: str | None = None,
) -> ExperimentConfig:
    """Copy of ``cfg`` with command-line overrides applied."""
    run = cfg.run
    if task is not None:
        run = replace(run, task=task)
    if seed is not None:
        run = replace(run, seed=seed)
    if out is not None:
        run = replace(run, output_dir=out)
    prof = cfg.profile if profile is None else replace(cfg.profile, mode=profile)
    return replace(cfg, run=run, profile=prof)
