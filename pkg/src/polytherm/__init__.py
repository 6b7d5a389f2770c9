"""Numerical laboratory for polyconvex adiabatic thermoelasticity on the periodic torus."""

__version__ = "0.1.0"
