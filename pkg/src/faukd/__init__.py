"""Occlusion-robust facial action unit detection.

Reconstruction-based teacher (masked autoencoder + AU graph head) and a
distilled student that reads AU activations straight out of the encoder
latent space without knowing where the occlusion is.
"""

__version__ = "0.1.0"
