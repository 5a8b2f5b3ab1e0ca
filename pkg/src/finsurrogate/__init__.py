"""Bézier fin geometries, a desk-scale heat transfer oracle and CNN surrogates."""

__version__ = "0.1.0"
