"""Masked pseudolikelihood learning and block Gibbs sampling on small Ising models."""

__version__ = "0.1.0"
