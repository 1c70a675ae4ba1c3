"""Intrinsic reward policy optimization on sparse-reward gridworlds."""

__version__ = "0.1.0"
