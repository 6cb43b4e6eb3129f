"""Amortized permeability inversion from sparse pressure data with a differentiable Darcy solver."""

__version__ = "0.1.0"
