"""Pseudo-spectral Stokes-with-drift simulator and decay verification harness."""

__version__ = "0.1.0"

from .fields import Grid, ScalarField, TensorField, VectorField

__all__ = ["Grid", "ScalarField", "TensorField", "VectorField", "__version__"]
