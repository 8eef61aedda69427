"""Continuous key codes indexing groups of multi-resolution hash tables."""

__version__ = "0.1.0"
