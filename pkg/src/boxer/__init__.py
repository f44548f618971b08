"""Transparent TCP overlay for NAT-confined workers."""

__version__ = "0.1.0"
