"""Spectral laboratory for log-log blowup of the 2D cubic focusing NLS under
unit-scale randomized L2 perturbations."""

__version__ = "0.1.0"
