"""Kicked stochastic 2D Navier-Stokes chain with verification diagnostics."""

__version__ = "0.1.0"
