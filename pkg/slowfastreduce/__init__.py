"""Stochastic slow-fast model reduction: slow manifolds, averaging and martingale corrections."""

__version__ = "0.1.0"
