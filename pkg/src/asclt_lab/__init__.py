"""Simulation laboratory for moment convergence in the almost sure CLT for vector martingales."""

__version__ = "0.1.0"
