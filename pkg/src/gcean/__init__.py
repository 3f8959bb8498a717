"""Unsupervised ego/exo view adaptation for dense procedural activity captioning."""

__version__ = "0.1.0"
