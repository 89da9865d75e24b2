"""Personalized preference alignment of a toy conditional diffusion model."""

__version__ = "0.1.0"
