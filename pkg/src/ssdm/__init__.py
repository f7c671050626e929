"""Diffusion-model denoising of stepwise single-molecule signals."""

__version__ = "0.1.0"
