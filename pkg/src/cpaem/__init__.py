"""Exact inference and EM training for continuous piecewise-affine generative networks."""

__version__ = "0.1.0"
