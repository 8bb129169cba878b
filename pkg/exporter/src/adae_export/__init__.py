"""Offline embedding exporter writing ADAE v1 files."""

__version__ = "0.1.0"
