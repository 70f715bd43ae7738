"""Diffusive visual-to-textual feature alignment for classification."""

__version__ = "0.1.0"
