"""Utility functions for sdeinfer."""
