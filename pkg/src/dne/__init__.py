"""Noise-adaptive speech enhancement with VAD-guided dynamic noise embeddings."""

__version__ = "0.1.0"
