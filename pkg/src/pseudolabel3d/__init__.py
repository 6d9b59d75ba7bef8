"""Unsupervised 3D pseudo-labeling for LiDAR point clouds."""

__version__ = "0.1.0"
