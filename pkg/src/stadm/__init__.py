"""Diffusion-based spatial super-resolution of multichannel EEG-like epochs."""

__version__ = "0.1.0"
