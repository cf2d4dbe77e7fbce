"""Autoencoder features + simulated quantum fidelity-kernel SVMs."""

__version__ = "0.1.0"
