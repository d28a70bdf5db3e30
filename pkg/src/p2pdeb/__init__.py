"""Tamper-evident evidence bags for P2P network captures."""

__version__ = "0.1.0"
