"""Supervised Transformer autoencoder that extrapolates delay power spectra from CSI."""

__version__ = "0.1.0"
