"""Fractional polyharmonic operators and exterior problems on hyperbolic space."""

__version__ = "0.1.0"
