"""Finite cell phase-field fracture simulation driven by voxel images."""

__version__ = "0.1.0"
