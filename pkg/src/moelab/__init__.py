"""Mixture-of-experts routing laboratory: affinity routing, capacity, and success-rate theory."""

__version__ = "0.1.0"
