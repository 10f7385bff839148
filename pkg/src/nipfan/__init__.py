"""Differentiable photo acquisition and distribution channel with forensic analysis."""

__version__ = "0.1.0"
