"""Hybrid knowledge routing over region graphs, implemented on numpy."""

__version__ = "0.1.0"
