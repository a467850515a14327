"""Randomized advantage transformation for damped natural policy gradients."""

__version__ = "0.1.0"
