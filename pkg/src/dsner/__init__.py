"""Span-based named entity recognition from distant supervision."""

__version__ = "0.1.0"
