"""CSV and JSON writers shared by the pipeline stages."""

import json
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from sdeinfer.__version__ import __version__


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, data: dict) -> Path:
    """Write data as indented JSON with sorted keys."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: Path) -> dict:
    with open(path) as f:
        return json.load(f)


def write_manifest(
    path: Path,
    stage: str,
    config: dict,
    seeds: dict,
    files: Iterable[Path],
    extra: Optional[dict] = None,
) -> Path:
    """Write a stage manifest.

    Args:
        path: Manifest file
        stage: Pipeline stage name
        config: Effective configuration the stage ran with
        seeds: Master seed and derived stream seeds
        files: Files the stage produced
        extra: Stage-specific results

    Returns:
        Path to the manifest
    """
    root = path.parent
    names = sorted(str(Path(f).relative_to(root)) if Path(f).is_relative_to(root) else str(f) for f in files)
    manifest = {
        "stage": stage,
        "sdeinfer_version": __version__,
        "config": config,
        "seeds": seeds,
        "files": names,
        **(extra or {}),
    }
    return write_json(path, manifest)


def write_csv(path: Path, header: list[str], columns: list, fmt: Optional[list[str]] = None) -> Path:
    """Write equal-length columns as CSV with a header row."""
    rows = np.column_stack([np.asarray(c) for c in columns]) if columns else np.empty((0, len(header)))
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt=fmt or "%.17g")
    return path


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
    return path


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    """Header names and numeric rows of a CSV written by write_csv."""
    with open(path) as f:
        header = f.readline().strip().split(",")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, rows
