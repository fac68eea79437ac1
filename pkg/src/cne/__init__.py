"""Contrastive neighbor embeddings: NEG, NCE, InfoNCE and UMAP on one skNN engine."""

__version__ = "0.1.0"
