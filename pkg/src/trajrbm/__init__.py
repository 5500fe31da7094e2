"""Equilibrium RBM training, trajectory AIS and parallel trajectory tempering."""

__version__ = "0.1.0"
