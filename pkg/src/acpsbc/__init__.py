"""Adaptive conformal safety barrier certificates for stochastic multi-robot MPC."""

__version__ = "0.1.0"
