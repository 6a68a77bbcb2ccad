"""CLI subcommands for sdeinfer."""
