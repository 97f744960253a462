"""Supermartingale optimal transport: couplings, transition curves, simulation and duality."""

__version__ = "0.1.0"
