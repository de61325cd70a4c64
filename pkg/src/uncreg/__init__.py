"""Uncertainty-aware transformation fitting and propagation for registration."""

from .grid import Grid, LabelVolume, Mask, MeanStdField, ScalarVolume

__all__ = ["Grid", "LabelVolume", "Mask", "MeanStdField", "ScalarVolume"]
__version__ = "0.1.0"
