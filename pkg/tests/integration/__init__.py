"""Integration tests for sdeinfer."""
