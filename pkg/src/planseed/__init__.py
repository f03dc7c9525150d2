"""Diffusion-seeded trajectory optimization for a planar arm in cluttered 2D worlds."""

__version__ = "0.1.0"
