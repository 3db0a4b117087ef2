"""Learned crop growth forecasting from aligned cross-time image pairs."""

__version__ = "0.1.0"
