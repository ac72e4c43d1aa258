"""Anchor-based stratified spatio-temporal kriging."""

__version__ = "0.1.0"
