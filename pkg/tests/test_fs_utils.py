from pathlib import Path


from circlab.common.fs import prepare_output_dir, unique_path


def test_unique_path_generates_incremented_names(tmp_path: Path) -> None:
    base = tmp_path / "summary.json"
    # First call should be the base if missing
    assert unique_path(base) == base

    # Create base file, then expect (1)
    base.write_bytes(b"")
    p1 = unique_path(base)
    assert p1.name == "summary (1).json"

    # Create (1), expect (2)
    (tmp_path / "summary (1).json").write_bytes(b"")
    p2 = unique_path(base)
    assert p2.name == "summary (2).json"


def test_unique_path_no_suffix(tmp_path: Path) -> None:
    base = tmp_path / "run"
    base.write_bytes(b"")
    p1 = unique_path(base)
    assert p1.name == "run (1)"


def test_prepare_output_dir_reuses_empty_and_never_clobbers(tmp_path: Path) -> None:
    empty = tmp_path / "canonical"
    empty.mkdir()
    assert prepare_output_dir(empty) == empty

    (empty / "summary.json").write_text("{}")
    fresh = prepare_output_dir(empty)
    assert fresh.name == "canonical (1)"
    assert fresh.is_dir()
    assert (empty / "summary.json").read_text() == "{}"


def test_prepare_output_dir_creates_missing(tmp_path: Path) -> None:
    target = tmp_path / "runs" / "new"
    out = prepare_output_dir(target)
    assert out == target
    assert out.is_dir()
