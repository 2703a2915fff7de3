"""Partially stochastic straight-through estimators for emergent-communication games."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
