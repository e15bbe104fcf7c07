"""Kernel-based reactive power control rules for radial distribution feeders."""

__version__ = "0.1.0"
