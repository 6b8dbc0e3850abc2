"""Difficulty-aware label perturbation and denoising for monocular 3D detection labels."""

__version__ = "0.1.0"
