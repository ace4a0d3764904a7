"""Unsupervised degradation-adaptation network for 3D MRI super-resolution."""

__version__ = "0.1.0"
