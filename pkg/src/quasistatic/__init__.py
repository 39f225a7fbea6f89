"""Quasistatic dynamical systems of expanding circle maps: coefficients, ensembles, limit laws."""

__version__ = "0.1.0"
