"""Causal chain reliability with exogenous-aware latent variables."""
__version__ = "0.1.0"
