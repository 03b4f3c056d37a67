"""Periodic-parabolic principal eigenvalues and degenerate logistic equations."""

__version__ = "0.1.0"
