"""Differentiable DRR projection, 3D/2D registration and limited-angle reconstruction."""

__version__ = "0.1.0"
