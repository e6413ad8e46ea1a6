"""Desk-scale multispectral (visible + infrared) detection transformer."""
__version__ = "0.1.0"
