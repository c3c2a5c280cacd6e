"""Interpretable ICU outcome prediction from structured channels and note phenotypes."""

__version__ = "0.1.0"
