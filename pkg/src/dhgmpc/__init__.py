"""Thermo-hydraulic modelling and predictive control of district heating grids."""

__version__ = "0.1.0"
