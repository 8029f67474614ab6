"""Calibration-regularized Bayesian learning, OOD confidence minimization and selective calibration."""

__version__ = "0.1.0"
