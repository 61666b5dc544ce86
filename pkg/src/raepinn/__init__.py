"""Residual-weighted PINNs for Allen-Cahn and Cahn-Hilliard problems."""

__version__ = "0.1.0"
