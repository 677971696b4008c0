"""Anchor-guided indoor scene understanding at desk scale."""

__version__ = "0.1.0"
