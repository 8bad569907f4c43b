"""Desk-scale toolkit for MAE-prior alignment of latent inpainting models."""

__version__ = "0.1.0"
