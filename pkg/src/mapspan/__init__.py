"""Span extraction with matrix-based conditional start/end prediction."""

__version__ = "0.1.0"
