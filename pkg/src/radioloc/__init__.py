"""Geometric mmWave channel synthesis, localization bounds, signal design and
estimation."""

__version__ = "0.1.0"
