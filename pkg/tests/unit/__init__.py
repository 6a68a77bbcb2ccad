"""Unit tests for sdeinfer."""
