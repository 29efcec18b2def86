"""Cellular-automata land-change simulation with random-forest transition rules."""

__version__ = "0.1.0"
