"""Streaming text-to-motion generation with a causal latent space."""

__version__ = "0.1.0"
