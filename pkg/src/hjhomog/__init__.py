"""Numerical homogenization of weakly coupled viscous Hamilton-Jacobi systems in random media."""

__version__ = "0.1.0"
