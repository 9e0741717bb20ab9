"""Desk-scale high-resolution cross-attention visual-language decoder."""

__version__ = "0.1.0"
