"""Recommendation from short- and long-term textual user profiles fused by attention."""

__version__ = "0.1.0"
