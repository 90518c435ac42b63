"""Symbolic robustness and monotonicity verification for piecewise-linear RL policies."""

__version__ = "0.1.0"
