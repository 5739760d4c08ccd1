"""Cascaded layout diffusion for indoor scenes with sparse relation graphs."""

__version__ = "0.1.0"
