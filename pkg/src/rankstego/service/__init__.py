"""HTTP service exposing a model over the next-distribution protocol."""

from .app import create_app

__all__ = ["create_app"]
