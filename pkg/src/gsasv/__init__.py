"""Spoof-aware speaker verification backend on fixed speaker embeddings."""

__version__ = "0.1.0"
