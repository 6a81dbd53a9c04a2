"""Toy-scale gated self-attention grounding with sequential vs parallel wiring."""

__version__ = "0.1.0"
