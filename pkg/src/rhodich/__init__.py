"""Numerical toolkit for rho-dichotomies of nonautonomous linear dynamics."""

__version__ = "0.1.0"
