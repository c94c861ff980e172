"""Iteratively coupled multiple-instance learning at desk scale."""

__version__ = "0.1.0"
