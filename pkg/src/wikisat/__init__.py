"""Geolocated Wikipedia articles paired with satellite tiles for visual pre-training."""

__version__ = "0.1.0"
