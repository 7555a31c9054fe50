"""Quantitative MRI pipeline: fingerprint simulation, subspace-compressed
reconstruction and parameter inference."""

__version__ = "0.1.0"
