"""Delay-robust gain synthesis and verification for augmented primal-dual gradient dynamics."""

__version__ = "0.1.0"
