"""Deterministic control-plane simulator of a VPN-based local computing grid."""

__version__ = "0.1.0"
