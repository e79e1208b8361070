"""Rotation-aware attention biases for video restoration."""
__version__ = "0.1.0"
