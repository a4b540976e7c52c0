"""Pekar variational problem, mean-field path measures and the Pekar process."""

__version__ = "0.1.0"
