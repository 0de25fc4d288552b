"""Interpretable ICD code embeddings with self-attention fusion and optimal-transport regularization."""

from icd_embed.errors import DataError, IcdEmbedError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "IcdEmbedError", "NumericalError", "__version__"]
