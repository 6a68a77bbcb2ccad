"""Tests for sdeinfer."""
