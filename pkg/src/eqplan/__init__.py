"""Equilibrium sequence planning: fixed-point plan refinement with implicit
gradients, a toy household world, and closed-loop training."""

__version__ = "0.1.0"
