"""Quasi-stationary distributions of finite-population imitation chains."""

__version__ = "0.1.0"
