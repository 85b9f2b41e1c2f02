"""Length-aware text-to-motion synthesis via latent diffusion."""

__version__ = "0.1.0"
