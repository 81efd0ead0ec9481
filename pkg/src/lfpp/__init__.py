"""Simulation and numerical checks for Liouville first passage percolation in d >= 2."""

__version__ = "0.1.0"
