"""Latent traversal by embedding swaps in a small conditional diffusion model,
with synthetic phantoms, Bezier interpolation and disentanglement metrics."""

__version__ = "0.1.0"
