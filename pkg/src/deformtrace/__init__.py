"""Temporal forgery localization with deformable state-space blocks."""

__version__ = "0.1.0"
