from dataclasses import dataclass
import json
import math
from pathlib import Path

import numpy as np
import pytest

from circlab.common.settings import ExperimentConfig
from circlab.inducing import Branch, InducedMarkovMap
from circlab.reports import (
    ReportBundle,
    dumps_canonical,
    plot_tail,
    to_jsonable,
    write_branches,
    write_csv,
    write_summary,
)


@dataclass
class Point:
    x: float
    tags: tuple[str, ...]


def test_to_jsonable_handles_numpy_and_non_finite() -> None:
    out = to_jsonable(
        {
            "n": np.int64(3),
            "v": np.float64(0.5),
            "arr": np.array([1.0, np.nan]),
            "inf": math.inf,
            "neg": -math.inf,
            "p": Point(1.0, ("a",)),
            "path": Path("runs") / "x",
            7: (True, None),
        }
    )
    assert out == {
        "n": 3,
        "v": 0.5,
        "arr": [1.0, "nan"],
        "inf": "inf",
        "neg": "-inf",
        "p": {"x": 1.0, "tags": ["a"]},
        "path": "runs/x",
        "7": [True, None],
    }
    with pytest.raises(TypeError):
        to_jsonable(object())


def test_dumps_canonical_is_sorted_and_stable() -> None:
    text = dumps_canonical({"b": 1, "a": [0.1, float("nan")]})
    assert text == '{\n  "a": [\n    0.1,\n    "nan"\n  ],\n  "b": 1\n}\n'
    assert dumps_canonical({"a": [0.1, float("nan")], "b": 1}) == text


def test_csv_floats_round_trip(tmp_path: Path) -> None:
    path = write_csv(tmp_path / "x.csv", ("n", "value"), [(1, 1.0 / 3.0), (2, np.float64(0.1))])
    lines = path.read_text().splitlines()
    assert lines == ["n,value", "1,0.3333333333333333", "2,0.1"]


def test_summary_embeds_config_and_hash(tmp_path: Path) -> None:
    cfg = ExperimentConfig()
    bundle = ReportBundle(tmp_path)
    path = write_summary(bundle, cfg, {"stats": {"tau": 0.4, "bad": math.nan}})
    assert path == tmp_path / "summary.json"
    assert bundle.files == [path]
    data = json.loads(path.read_text())
    assert set(data) == {"config", "config_hash", "results", "failures", "passed"}
    assert data["config_hash"] == cfg.content_hash()
    assert data["config"]["map"]["L"] == 200.0
    assert data["results"]["stats"] == {"tau": 0.4, "bad": "nan"}
    assert data["passed"] is True


def test_failures_flip_passed(tmp_path: Path) -> None:
    bundle = ReportBundle(tmp_path)
    bundle.failures.append({"task": "clt", "check": "ks_distance"})
    data = json.loads(write_summary(bundle, ExperimentConfig(), {}).read_text())
    assert data["passed"] is False
    assert data["failures"] == [{"task": "clt", "check": "ks_distance"}]


def test_svg_output_is_reproducible(tmp_path: Path) -> None:
    counts = {n: math.exp(-0.3 * n) for n in range(30)}
    fit = (-0.3, 0.0, 1.0)
    a = plot_tail(tmp_path / "a.svg", counts, fit)
    b = plot_tail(tmp_path / "b.svg", counts, fit)
    assert a.read_bytes() == b.read_bytes()
    assert b"<svg" in a.read_bytes()


def test_branch_table_lists_both_endpoints(tmp_path: Path) -> None:
    b = Branch(
        anchor=0.25,
        dsize=0.5,
        log_size=math.log(0.5),
        weight=0.5,
        return_time=4,
        large_scale_times=[1, 3],
        tail_step=1,
        lap_lo=0.0,
        lap_hi=1.0,
        hist_P=np.zeros(3),
        node_P=np.full(3, 2.0),
    )
    imap = InducedMarkovMap([b], total_mass=0.5, unresolved_measure=0.0, harvest="laps")
    header, row = write_branches(tmp_path / "branches.csv", imap).read_text().splitlines()
    assert header.split(",")[:3] == ["left", "right", "log_size"]
    fields = row.split(",")
    assert fields[0] == "0.25" and fields[1] == "0.75"
    assert fields[4] == "4"
    assert fields[6] == "1 3"
