"""JSON service wrapping the estimation pipelines."""

from .app import NumericalFailure, create_app

__all__ = ["NumericalFailure", "create_app"]
