"""Simulation and desk-scale verification of alpha-stable mean-field dynamics."""

__version__ = "0.1.0"
