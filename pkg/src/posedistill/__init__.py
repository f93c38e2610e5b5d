"""Distilling a heatmap pose teacher into a coordinate-regression student, on a numpy autodiff engine."""

__version__ = "0.1.0"
