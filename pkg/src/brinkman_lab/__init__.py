"""Numerical laboratory for compressible Brinkman flow with general pressure laws."""

__version__ = "0.1.0"
