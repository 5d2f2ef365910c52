"""Temporal-kernel sequence learning: learnable random-feature temporal kernels
composed with feedforward and recurrent networks."""

__version__ = "0.1.0"
