"""Adaptive spatio-temporal graph learning for short-term voltage stability."""

__version__ = "0.1.0"
