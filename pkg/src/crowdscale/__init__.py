"""Multiscale crowd dynamics: individual-based, kinetic and fluid models of collision avoidance."""

__version__ = "0.1.0"
