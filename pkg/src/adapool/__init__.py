"""Continual learning with a fixed pool of consolidated residual adapters."""

__version__ = "0.1.0"
