"""Differentiable panoramic Gaussian splatting for LiDAR re-simulation."""

__version__ = "0.1.0"
