"""Symbolic-regression GP with batch tournament, tournament and lexicase selection."""

from ._backend import name as backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
