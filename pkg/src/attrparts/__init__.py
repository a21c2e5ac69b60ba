"""Attribute-guided part detection and refinement for person re-identification."""

__version__ = "0.1.0"
