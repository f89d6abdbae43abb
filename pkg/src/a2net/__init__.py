"""Attribute-aware deep hashing with a from-scratch autodiff engine."""

__version__ = "0.1.0"
