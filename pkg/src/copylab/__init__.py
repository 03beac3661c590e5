"""Copying with transformers and finite-state sequence models at desk scale."""

__version__ = "0.1.0"
