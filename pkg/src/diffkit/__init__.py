"""Uncertainty-aware 3D pose lifting with GMM-anchored diffusion, in numpy."""

__version__ = "0.1.0"
