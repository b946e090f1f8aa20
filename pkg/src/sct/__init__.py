"""Spectral-CT material decomposition with learned dictionaries."""

__version__ = "0.1.0"
