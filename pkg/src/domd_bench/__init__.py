"""Depth-from-motion geometry engine with dynamic object motion disentanglement."""

__version__ = "0.1.0"
