"""Patch-based implicit shape representation with blended signed distance fields."""
__version__ = "0.1.0"
