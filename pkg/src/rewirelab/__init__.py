"""Contrastive rewiring laboratory for a small self-trained encoder."""

__version__ = "0.1.0"
