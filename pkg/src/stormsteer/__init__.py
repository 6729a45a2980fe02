"""Steering toy extreme-precipitation forecasts with guided residual diffusion."""

__version__ = "0.1.0"
