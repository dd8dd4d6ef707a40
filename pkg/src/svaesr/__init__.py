"""Arbitrary-scale image super-resolution with an introspective conditional VAE."""

__version__ = "0.1.0"
