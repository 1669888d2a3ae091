"""Thermo-visco-elastodynamics with rate-independent partial damage on 2D P1 meshes."""

__version__ = "0.1.0"
