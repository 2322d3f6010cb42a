"""Instrumental-variable Bayesian causal forests for heterogeneous complier effects."""

__version__ = "0.1.0"
