"""Filtered behavior cloning vs. decision transformers on sparse-reward offline data."""

__version__ = "0.1.0"
