"""Desk-scale visual-geometry learning lab on synthetic scenes."""

__version__ = "0.1.0"
