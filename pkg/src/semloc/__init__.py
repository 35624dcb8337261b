"""Semantic coarse-to-fine camera localization against a Gaussian-splat map."""

__version__ = "0.1.0"
