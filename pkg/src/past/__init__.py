"""Pixel-aligned self-training for unsupervised domain adaptation of volumetric segmenters."""

__version__ = "0.1.0"
