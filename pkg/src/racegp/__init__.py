"""Learning-based model correction for autonomous racing with MPC."""

__version__ = "0.1.0"
