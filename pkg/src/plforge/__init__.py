"""Uncertainty-aware pseudo-label filtering for source-free domain adaptation on feature vectors."""

__version__ = "0.1.0"
