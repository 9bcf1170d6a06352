"""Gradient inverse consistency for deformable image registration."""

__version__ = "0.1.0"
