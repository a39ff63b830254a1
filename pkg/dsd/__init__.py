"""Particle-conserving discrete spatial diffusion engine."""

__version__ = "0.1.0"
