"""Desk-scale audio-driven face dubbing toolkit."""

__version__ = "0.1.0"
