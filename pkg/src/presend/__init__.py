"""Trace-driven instruction front-end simulator with FDIP and instruction presending."""

__version__ = "0.1.0"
