"""Dually enhanced propensity scores for unbiased sequential recommendation."""

__version__ = "0.1.0"
