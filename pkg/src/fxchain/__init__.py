"""Differentiable mastering effects and blind effect-parameter estimation."""

__version__ = "0.1.0"
