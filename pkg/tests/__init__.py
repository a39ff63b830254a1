"""Test package for the discrete spatial diffusion engine."""
