"""Attention-weighted trigram query embeddings and their validation harness."""

__version__ = "0.1.0"
