"""Continual differential privacy laboratory: interactive mechanisms, composition
operators and exact checking tools."""

__version__ = "0.1.0"
