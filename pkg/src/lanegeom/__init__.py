"""Hierarchical 3D lane geometry: adaptive-axis curves, Gaussian segment
matching, set assignment, BEV rasterization and dense-sampling evaluation."""

__version__ = "0.1.0"
