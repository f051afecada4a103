"""Benchmarking toolkit for Japanese image-to-recipe generation models."""

__version__ = "0.1.0"
