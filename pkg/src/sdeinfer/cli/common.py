"""Options and error handling shared by the pipeline subcommands."""

import functools
import logging
import warnings
from pathlib import Path
from typing import Callable, Optional

import click

from sdeinfer.core.config import PipelineConfig
from sdeinfer.core.errors import (
    ConfigurationError,
    MissingArtifactError,
    NumericalDomainError,
    SolverError,
)
from sdeinfer.utils.rng import stage_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERICAL = 4

EXIT_CODES = (
    (ConfigurationError, EXIT_CONFIG, "Configuration error"),
    (MissingArtifactError, EXIT_MISSING_ARTIFACT, "Missing artifact"),
    (NumericalDomainError, EXIT_NUMERICAL, "Numerical failure"),
    (SolverError, EXIT_NUMERICAL, "Solver failure"),
)


def load_config(config_path: Optional[Path], out: Optional[Path], seed: Optional[int]) -> PipelineConfig:
    """Load the config file (or the defaults) and apply --out / --seed."""
    config = PipelineConfig.from_file(config_path) if config_path is not None else PipelineConfig()
    if out is not None:
        config.output_dir = out
    if seed is not None:
        config.seed = seed
    return config


def stage_seeds(config: PipelineConfig, stage: str) -> dict:
    return {"master": config.seed, stage: stage_seed(config.seed, stage)}


def _show_warnings(caught: list) -> None:
    seen = set()
    for w in caught:
        text = f"{w.category.__name__}: {w.message}"
        if text in seen:
            continue
        seen.add(text)
        click.secho(f"⚠ {text}", fg="yellow", err=True)


def pipeline_stage(func: Callable) -> Callable:
    """Add --config/--out/--seed to a stage and map library errors to exit codes.

    The wrapped function receives the loaded PipelineConfig as `config`.
    """

    @click.option(
        "--config",
        "-c",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="Pipeline configuration file (YAML); defaults apply when omitted",
    )
    @click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), help="Output directory")
    @click.option("--seed", type=click.IntRange(min=0, max=2**64 - 1), help="Master seed")
    @click.pass_context
    @functools.wraps(func)
    def wrapper(ctx, config_path, out, seed, **kwargs):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                config = load_config(config_path, out, seed)
                result = ctx.invoke(func, config=config, **kwargs)
            except (ConfigurationError, MissingArtifactError, NumericalDomainError, SolverError) as e:
                _show_warnings(caught)
                for error_type, code, label in EXIT_CODES:
                    if isinstance(e, error_type):
                        click.secho(f"Error: {label}: {e}", fg="red", err=True)
                        ctx.exit(code)
                raise
        _show_warnings(caught)
        return result

    return wrapper


def success(message: str) -> None:
    click.secho(f"✓ {message}", fg="green")
