"""Hessian-free training of recurrent character models."""

__version__ = "0.1.0"
