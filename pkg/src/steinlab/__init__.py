"""Stein variational gradient descent with large-deviation diagnostics."""
__version__ = "0.1.0"
