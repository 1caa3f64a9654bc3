"""Pricing under stochastic elastic demand on route networks."""

__version__ = "0.1.0"
