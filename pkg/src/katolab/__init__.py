"""Numerical laboratory for non-divergence elliptic operators on a periodic torus."""

__version__ = "0.1.0"
