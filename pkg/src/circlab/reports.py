"""Report emission: summary.json, CSV dumps and SVG plots.

The summary is canonical JSON (sorted keys, shortest round-trip floats, no
timestamps) so the same config and seed give the same bytes.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, is_dataclass
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "circlab"
from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402

from .common.settings import ExperimentConfig  # noqa: E402

SUMMARY_NAME = "summary.json"


@dataclass
class ReportBundle:
    directory: Path
    files: list[Path] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def summary_path(self) -> Path:
        return self.directory / SUMMARY_NAME

    def add(self, path: Path) -> Path:
        self.files.append(path)
        return path


# ---------- JSON ----------
def to_jsonable(obj: Any) -> Any:
    """Plain JSON values; non-finite floats become the strings "nan", "inf", "-inf"."""
    if isinstance(obj, (bool, str)) or obj is None:
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(asdict(obj))
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return obj.as_posix()
    if isinstance(obj, Iterable):
        return [to_jsonable(v) for v in obj]
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps_canonical(payload: Any) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_summary(
    bundle: ReportBundle, cfg: ExperimentConfig, results: Mapping[str, Any]
) -> Path:
    payload = {
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "results": results,
        "failures": bundle.failures,
        "passed": bundle.passed,
    }
    path = bundle.summary_path
    path.write_text(dumps_canonical(payload), encoding="utf-8")
    return bundle.add(path)


# ---------- CSV ----------
def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_orbit_dump(path: Path, orbit) -> Path:
    """One row per orbit point: n, x_n, ln|(f^n)'x_0|, d_C, d_S and the step flag."""
    flags = list(orbit.flags) + [""] * (len(orbit.points) - len(orbit.flags))
    rows = zip(
        range(len(orbit.points)), orbit.points, orbit.log_deriv_prefix, orbit.dC, orbit.dS, flags
    )
    return write_csv(path, ("n", "x", "log_derivative", "d_C", "d_S", "flag"), rows)


def write_decomposition(path: Path, decomposition) -> Path:
    rows = (
        (e.time, e.critical_point, e.distance, e.r_index, e.bound_period, e.depth, int(e.clamped))
        for e in decomposition.events
    )
    return write_csv(
        path,
        ("time", "critical_point", "distance", "r_index", "bound_period", "depth", "clamped"),
        rows,
    )


def write_branches(path: Path, imap) -> Path:
    rows = (
        (
            b.domain[0],
            b.domain[1],
            b.log_size,
            b.weight,
            b.return_time,
            b.tail_step,
            " ".join(str(t) for t in b.large_scale_times),
            b.coverage_defect,
            b.log_derivative,
        )
        for b in imap.branches
    )
    return write_csv(
        path,
        (
            "left",
            "right",
            "log_size",
            "weight",
            "return_time",
            "tail_step",
            "large_scale_times",
            "coverage_defect",
            "log_derivative",
        ),
        rows,
    )


def write_tail(path: Path, counts: Mapping[int, float]) -> Path:
    return write_csv(path, ("n", "measure"), sorted(counts.items()))


def write_correlations(path: Path, data) -> Path:
    usable = data.usable
    rows = ((n, c, int(n < usable)) for n, c in enumerate(data.covariances))
    return write_csv(path, ("n", "covariance", "usable"), rows)


def write_samples(path: Path, values: np.ndarray, name: str = "value") -> Path:
    return write_csv(path, (name,), ((v,) for v in np.asarray(values)))


def write_sweep(path: Path, sweep) -> Path:
    rows = []
    for L, verdicts in sweep.verdicts.items():
        for a, v in zip(sweep.a_values, verdicts):
            f = v.first_failure
            rows.append(
                (L, a, int(v.passed), "" if f is None else f.condition, "" if f is None else f.time)
            )
    return write_csv(path, ("L", "a", "passed", "condition", "time"), rows)


# ---------- SVG ----------
def _save(fig: Figure, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_densities(path: Path, measures: Mapping[str, Any]) -> Path:
    fig = Figure(figsize=(8, 4))
    ax = fig.add_subplot()
    for label, mu in measures.items():
        centers = (np.arange(mu.bin_count) + 0.5) / mu.bin_count
        ax.plot(centers, mu.density, lw=0.8, label=label)
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    ax.legend()
    return _save(fig, path)


def plot_correlations(path: Path, data, fit=None) -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    n = np.arange(len(data.covariances))
    ax.semilogy(n, np.maximum(data.correlations, 1e-300), "o", ms=3, label="|C_n|")
    ax.axhline(data.noise_floor, color="grey", ls="--", lw=0.8, label="noise floor")
    if fit is not None:
        ax.semilogy(n, fit.constant * fit.tau**n, lw=1.0, label=f"tau = {fit.tau:.3f}")
    ax.set_xlabel("n")
    ax.legend()
    return _save(fig, path)


def plot_clt(path: Path, values: np.ndarray, sigma_squared: float) -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    ax.hist(values, bins=60, density=True, alpha=0.6)
    if sigma_squared > 0:
        s = math.sqrt(sigma_squared)
        xs = np.linspace(-4 * s, 4 * s, 400)
        ax.plot(xs, np.exp(-0.5 * (xs / s) ** 2) / (s * math.sqrt(2 * math.pi)), lw=1.2)
    ax.set_xlabel("S_n / sqrt(n)")
    return _save(fig, path)


def plot_tail(path: Path, counts: Mapping[int, float], fit: tuple[float, float, float]) -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    ns = np.array(sorted(counts), dtype=float)
    vs = np.array([counts[int(n)] for n in ns])
    pos = vs > 0
    ax.semilogy(ns[pos], vs[pos], "o", ms=3)
    slope, intercept, _ = fit
    if math.isfinite(slope):
        ax.semilogy(ns, np.exp(intercept + slope * ns), lw=1.0, label=f"slope {slope:.3f}")
        ax.legend()
    ax.set_xlabel("n")
    ax.set_ylabel("measure")
    return _save(fig, path)


def plot_sweep(path: Path, sweep) -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    Ls = [r.L for r in sweep.rows]
    ax.semilogx(Ls, [r.fraction for r in sweep.rows], "o-")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("L")
    ax.set_ylabel("accepted fraction")
    ax.set_title(sweep.label)
    return _save(fig, path)
