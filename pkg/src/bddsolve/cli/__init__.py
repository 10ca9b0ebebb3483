"""Command-line front end and file formats."""

from ..generators import generate
from .formats import assemble_connection_laplacian

__all__ = ["generate", "assemble_connection_laplacian"]
