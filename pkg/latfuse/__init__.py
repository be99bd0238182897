"""Dual-latent fusion (AGF and DSF) over NCHW latents, with the tooling to check and benchmark it."""

__version__ = "0.1.0"
