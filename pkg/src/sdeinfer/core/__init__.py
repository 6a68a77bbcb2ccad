"""Numerical core of sdeinfer: simulation, discretization and inference."""
