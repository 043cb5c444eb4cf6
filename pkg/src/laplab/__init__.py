"""Leaf activity priority control for many-server, multi-class service systems."""

__version__ = "0.1.0"
