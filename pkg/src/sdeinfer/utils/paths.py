"""Artifact locations inside a pipeline output directory."""

from pathlib import Path

from sdeinfer.core.errors import ConfigurationError, MissingArtifactError

STAGES = ("simulate", "prepare", "solve", "infer", "sample", "predict")


def get_stage_dir(output_dir: Path, stage: str) -> Path:
    """Get (and create) the directory of one pipeline stage.

    Returns:
        Path to <output_dir>/<stage>/
    """
    if stage not in STAGES:
        raise ConfigurationError(f"Unknown stage: {stage}")
    stage_dir = Path(output_dir) / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    return stage_dir


def get_manifest_path(output_dir: Path, stage: str) -> Path:
    return get_stage_dir(output_dir, stage) / "manifest.json"


def get_exit_times_dir(output_dir: Path) -> Path:
    """Get the path to the per-site exit-time CSV files.

    Returns:
        Path to <output_dir>/simulate/exit_times/
    """
    return get_stage_dir(output_dir, "simulate") / "exit_times"


def get_observations_path(output_dir: Path) -> Path:
    return get_stage_dir(output_dir, "prepare") / "observations.json"


def get_laplace_path(output_dir: Path) -> Path:
    return get_stage_dir(output_dir, "infer") / "laplace.npz"


def get_chain_path(output_dir: Path) -> Path:
    return get_stage_dir(output_dir, "sample") / "chain.csv"


def require(path: Path, stage: str) -> Path:
    """Return path if it exists.

    Raises:
        MissingArtifactError: Naming the stage that produces the file
    """
    if not Path(path).exists():
        raise MissingArtifactError(f"Missing artifact: {path}\nRun 'sdeinfer {stage}' first.")
    return Path(path)
