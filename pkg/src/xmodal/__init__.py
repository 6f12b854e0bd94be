"""Paired transformer autoencoder for translating between robot actions and language."""

__version__ = "0.1.0"
