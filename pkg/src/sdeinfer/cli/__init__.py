"""CLI module for sdeinfer."""
