"""Sketch-conditioned synthesis of annotated microscopy-style images with diffusion models."""

__version__ = "0.1.0"
