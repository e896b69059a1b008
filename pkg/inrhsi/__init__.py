"""Hypernetwork-driven implicit neural representation for RGB to hyperspectral reconstruction."""

__version__ = "0.3.0"
