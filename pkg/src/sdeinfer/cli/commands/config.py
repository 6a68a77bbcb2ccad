"""Config command: show the effective configuration or write a starting file."""

from pathlib import Path

import click

from sdeinfer.cli.common import EXIT_CONFIG
from sdeinfer.core.config import PipelineConfig
from sdeinfer.core.errors import ConfigurationError


def _display_section(name: str, values: dict, indent: int = 2) -> None:
    pad = " " * indent
    click.secho(f"{pad}{name}:", fg="yellow", bold=True)
    for key, value in values.items():
        if isinstance(value, dict):
            _display_section(key, value, indent + 2)
        else:
            click.echo(f"{pad}  {key}: {value}")


def _display_config(config: PipelineConfig) -> None:
    """Display the effective configuration grouped by section."""
    click.secho("-" * 50, fg="green")
    source = config.source if config.source is not None else "defaults"
    click.secho(f"Effective configuration ({source}):", fg="green", bold=True)
    click.secho("-" * 50, fg="green")

    data = config.to_dict()
    for key in ("output_dir", "seed", "n_workers"):
        click.echo(f"  {key}: {data.pop(key)}")
    for name, values in data.items():
        _display_section(name, values)

    click.secho("-" * 50, fg="green")


@click.command(name="config")
@click.option(
    "--show",
    "show_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Validate a config file and print the effective values",
)
@click.option("--init", "init_path", type=click.Path(dir_okay=False, path_type=Path), help="Write the defaults to a file")
@click.option("--force", is_flag=True, help="Overwrite an existing file with --init")
@click.pass_context
def config_cmd(ctx, show_path, init_path, force):
    """Show or initialize a pipeline configuration."""
    if init_path is not None:
        if init_path.exists() and not force:
            click.secho(f"Error: {init_path} already exists (use --force to overwrite)", fg="red", err=True)
            ctx.exit(1)
        PipelineConfig().save(init_path)
        click.secho(f"✓ Default configuration written to {init_path}", fg="green")
        if show_path is None:
            return

    try:
        config = PipelineConfig.from_file(show_path) if show_path is not None else PipelineConfig()
    except ConfigurationError as e:
        click.secho(f"Error: Configuration error: {e}", fg="red", err=True)
        ctx.exit(EXIT_CONFIG)
    _display_config(config)
