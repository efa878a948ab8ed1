"""Desk-scale laboratory for sequential ensembling of semantic segmenters."""

__version__ = "0.1.0"
