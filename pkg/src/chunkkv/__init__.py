"""Prefix-aware chunked KV cache with two-phase partition attention."""

from chunkkv.config import ModelConfig

__version__ = "0.1.0"

__all__ = ["ModelConfig", "__version__"]
