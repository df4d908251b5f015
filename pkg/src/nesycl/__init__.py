"""Neuro-symbolic continual learning laboratory."""

__version__ = "0.1.0"
