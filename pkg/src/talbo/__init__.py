"""Time-aware latent-space Bayesian optimization over token sequences."""

__version__ = "0.1.0"
