"""Diffusion-parameter estimation from high-frequency observations on [0, 1]."""

__version__ = "0.1.0"
