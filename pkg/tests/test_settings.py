import json
from pathlib import Path

import pytest

from circlab.common.errors import ConfigError
from circlab.common.settings import (
    ExperimentConfig,
    config_from_dict,
    load_config,
    save_config,
)


def test_defaults_are_the_canonical_map(monkeypatch) -> None:
    monkeypatch.delenv("CIRCLAB_CONFIG", raising=False)
    cfg = load_config()
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.map.sine_coefficients == [1.0]
    assert cfg.map.L == 200.0
    assert cfg.profile.mode == "practical"
    assert cfg.profile.delta == 1e-2
    assert cfg.resolved_sigma() == pytest.approx(200.0 ** (-1.0 / 6.0))


def test_roundtrip_through_env_path(tmp_path: Path, monkeypatch) -> None:
    cfg_file = tmp_path / "config.json"
    monkeypatch.setenv("CIRCLAB_CONFIG", str(cfg_file))

    cfg = load_config()
    cfg.map.a = 0.125
    cfg.run.seed = 7
    save_config(cfg, cfg_file)

    cfg2 = load_config()
    assert cfg2.map.a == 0.125
    assert cfg2.run.seed == 7
    assert cfg2.content_hash() == cfg.content_hash()

    data = json.loads(cfg_file.read_text())
    assert data["map"]["a"] == 0.125


def test_env_directory_override_appends_filename(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.setenv("CIRCLAB_CONFIG", str(tmp_path))
    (tmp_path / "config.json").write_text(json.dumps({"map": {"L": 1000}}))
    cfg = load_config()
    assert cfg.map.L == 1000.0


def test_unknown_key_is_rejected_with_dotted_name() -> None:
    with pytest.raises(ConfigError, match="run.stats.bogus"):
        config_from_dict({"run": {"stats": {"bogus": 1}}})


def test_wrong_type_is_rejected() -> None:
    with pytest.raises(ConfigError, match="map.grid_points"):
        config_from_dict({"map": {"grid_points": "many"}})


def test_int_accepted_where_float_expected() -> None:
    cfg = config_from_dict({"map": {"L": 300}})
    assert cfg.map.L == 300.0
    assert isinstance(cfg.map.L, float)


@pytest.mark.parametrize(
    "raw",
    [
        {"profile": {"mode": "fancy"}},
        {"profile": {"delta": 0.9}},
        {"map": {"a": 1.0}},
        {"run": {"task": "nope"}},
        {"run": {"inducing": {"harvest": "both"}}},
        {"run": {"inducing": {"mass_target": 0.5}}},
        {"precision": {"promotion_threshold": 1e-20}},
    ],
)
def test_cross_field_checks(raw: dict) -> None:
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_missing_and_malformed_files(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_content_hash_changes_with_config() -> None:
    a = ExperimentConfig()
    b = ExperimentConfig()
    assert a.content_hash() == b.content_hash()
    b.run.seed += 1
    assert a.content_hash() != b.content_hash()


def test_mass_target_must_leave_room_for_a_tail_fit() -> None:
    with pytest.raises(ConfigError, match="mass_target"):
        config_from_dict({"run": {"inducing": {"mass_target": 0.9}}})
    assert config_from_dict({"run": {"inducing": {"mass_target": 0.95}}}).run.inducing.mass_target == 0.95
