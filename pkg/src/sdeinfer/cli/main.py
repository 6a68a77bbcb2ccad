"""Main CLI entry point for sdeinfer."""

import click

from sdeinfer.cli.commands.config import config_cmd
from sdeinfer.cli.commands.infer import infer
from sdeinfer.cli.commands.predict import predict
from sdeinfer.cli.commands.prepare import prepare
from sdeinfer.cli.commands.sample import sample
from sdeinfer.cli.commands.simulate import simulate
from sdeinfer.cli.commands.solve import solve
from sdeinfer.utils.banner import display_banner
from sdeinfer.utils.log import configure_logging


class OrderedGroup(click.Group):
    """Custom Click Group that displays commands in sections."""

    def format_commands(self, ctx, formatter):
        """Format commands with section headers."""
        sections = [
            ("Setup", ["config"]),
            ("Data", ["simulate", "prepare", "solve"]),
            ("Inference", ["infer", "sample", "predict"]),
        ]

        commands = {}
        for subcommand in self.list_commands(ctx):
            cmd = self.get_command(ctx, subcommand)
            if cmd is None or cmd.hidden:
                continue
            commands[subcommand] = cmd

        for section_name, command_names in sections:
            section_commands = [(name, commands[name]) for name in command_names if name in commands]
            if section_commands:
                with formatter.section(section_name):
                    formatter.write_dl(
                        [(name, cmd.get_short_help_str(limit=formatter.width)) for name, cmd in section_commands]
                    )


def _banner_then(show_help: bool):
    """Build an eager option callback that prints the banner, optionally the help, and exits."""

    def callback(ctx, param, value):
        if not value or ctx.resilient_parsing:
            return
        display_banner()
        if show_help:
            click.echo(ctx.get_help())
        ctx.exit()

    return callback


@click.group(cls=OrderedGroup, invoke_without_command=True)
@click.option(
    "--version",
    is_flag=True,
    callback=_banner_then(show_help=False),
    expose_value=False,
    is_eager=True,
    help="Show the banner with the version and exit.",
)
@click.option(
    "--help",
    "-h",
    is_flag=True,
    callback=_banner_then(show_help=True),
    expose_value=False,
    is_eager=True,
    help="Show this message and exit.",
)
@click.option("--verbose", "-v", is_flag=True, help="Log per-iteration detail")
@click.pass_context
def cli(ctx, verbose):
    """sdeinfer - infer drift and diffusion of 1D SDEs from trajectory data.

    Run the stages in order: simulate, prepare, infer, sample, predict.
    Every stage reads the same --config file.
    """
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    configure_logging(verbose)

    if ctx.invoked_subcommand is None:
        display_banner()
        click.echo(ctx.get_help())


cli.add_command(config_cmd)
cli.add_command(simulate)
cli.add_command(prepare)
cli.add_command(solve)
cli.add_command(infer)
cli.add_command(sample)
cli.add_command(predict)


if __name__ == "__main__":
    cli()
