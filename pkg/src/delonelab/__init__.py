"""Numerical laboratory for Delone-Anderson operators with and without magnetic field."""

__version__ = "0.1.0"
