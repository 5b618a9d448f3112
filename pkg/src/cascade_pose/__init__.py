"""Cascaded coarse-to-fine few-shot 6DoF pose estimation with explicit matching costs."""

__version__ = "0.1.0"
