"""Bidirectional abnormality reconstruction for synthetic echo-like video."""

__version__ = "0.1.0"
