"""Latent state-space sentence generator with a globally normalised CRF observation model."""

__version__ = "0.1.0"
