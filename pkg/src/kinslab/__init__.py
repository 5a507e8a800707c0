"""Linearized hard-sphere Boltzmann dynamics in a slab with diffuse walls."""

__version__ = "0.1.0"
