"""Probabilistic tri-modal (image / audio / text) embeddings for soundscape mapping."""

__version__ = "0.1.0"
