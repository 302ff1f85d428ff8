"""Numerical study of the Donaldson functional for Higgs-type data on hyperbolic surfaces."""

__version__ = "0.1.0"
