"""Approximate inverses for block diagonally dominant matrices."""

__version__ = "0.1.0"
