"""Differentiable vector graphics: Bezier paths fitted to raster images."""

__version__ = "0.1.0"
