"""Autoregressive and step-unrolled denoising language models on one transformer."""

__version__ = "0.1.0"
