"""Density deconvolution with normalizing flows and a Gaussian-mixture baseline."""

__version__ = "0.1.0"
