"""Unit tests for seed derivation, artifact paths and the CSV/JSON writers."""

import json
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest
from rich.console import Console

from sdeinfer.__version__ import __version__
from sdeinfer.core.errors import MissingArtifactError
from sdeinfer.utils.banner import LEVELS, display_banner, sample_path
from sdeinfer.utils.io import read_csv, write_csv, write_jsonl, write_manifest
from sdeinfer.utils.paths import get_exit_times_dir, get_laplace_path, get_stage_dir, require
from sdeinfer.utils.rng import stage_rng, stage_seed


def test_stage_seed_is_stable_and_distinct():
    assert stage_seed(1, "sample") == stage_seed(1, "sample")
    assert stage_seed(1, "sample") != stage_seed(1, "predict")
    assert stage_seed(1, "sample") != stage_seed(2, "sample")
    assert stage_rng(5, "infer").random() == stage_rng(5, "infer").random()


def test_stage_dirs():
    with TemporaryDirectory() as tmpdir:
        out = Path(tmpdir) / "run"
        stage_dir = get_stage_dir(out, "infer")

        assert stage_dir.is_dir()
        assert get_laplace_path(out) == stage_dir / "laplace.npz"
        assert get_exit_times_dir(out) == out / "simulate" / "exit_times"
        with pytest.raises(ValueError):
            get_stage_dir(out, "plot")


def test_require_names_upstream_stage():
    with TemporaryDirectory() as tmpdir:
        missing = Path(tmpdir) / "observations.json"
        with pytest.raises(MissingArtifactError, match="sdeinfer prepare"):
            require(missing, "prepare")

        missing.write_text("{}")
        assert require(missing, "prepare") == missing


def test_manifest_contents():
    with TemporaryDirectory() as tmpdir:
        root = Path(tmpdir)
        produced = root / "data.csv"
        produced.write_text("x\n")
        path = write_manifest(
            root / "manifest.json",
            "prepare",
            {"seed": 1},
            {"master": 1, "prepare": np.uint64(7)},
            [produced, Path("/elsewhere/file.csv")],
            {"sizes": np.array([1, 2])},
        )
        manifest = json.loads(path.read_text())

    assert manifest["stage"] == "prepare"
    assert manifest["sdeinfer_version"] == __version__
    assert manifest["seeds"] == {"master": 1, "prepare": 7}
    assert manifest["files"] == ["/elsewhere/file.csv", "data.csv"]
    assert manifest["sizes"] == [1, 2]


def test_csv_and_jsonl():
    with TemporaryDirectory() as tmpdir:
        root = Path(tmpdir)
        path = write_csv(root / "table.csv", ["x", "y"], [np.array([0.0, 0.5]), np.array([1.0, 0.1])])
        header, rows = read_csv(path)
        lines = write_jsonl(root / "log.jsonl", [{"a": np.float64(1.5)}, {"b": [1]}]).read_text().splitlines()

    assert header == ["x", "y"]
    assert rows.tolist() == [[0.0, 1.0], [0.5, 0.1]]
    assert [json.loads(line) for line in lines] == [{"a": 1.5}, {"b": [1]}]


def test_banner_path_is_deterministic():
    path = sample_path(width=30)

    assert len(path) == 30
    assert path == sample_path(width=30)
    assert set(path) <= set(LEVELS)
    assert LEVELS[0] in path and LEVELS[-1] in path


def test_banner_shows_version_and_stages():
    console = Console(record=True, width=80)
    display_banner(console)
    text = console.export_text()

    assert f"sdeinfer v{__version__}" in text
    assert "simulate → prepare" in text
