"""Hierarchical block-sparse attention for high-resolution diffusion transformers."""

__version__ = "0.1.0"
