"""Variational Bayesian regression networks and alpha-divergence calibration."""

__version__ = "0.1.0"
