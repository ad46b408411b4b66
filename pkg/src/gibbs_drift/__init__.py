"""Gibbs-drift global optimizer: exact oracle, Monte-Carlo drift and verification."""

__version__ = "0.1.0"
