"""Lifelong object-goal navigation with a semantic skeleton memory graph."""

__version__ = "0.1.0"
