"""Facial-expression similarity embeddings from triplet annotations."""

__version__ = "0.1.0"
