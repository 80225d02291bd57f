"""Token-superposition pre-training laboratory."""

__version__ = "0.1.0"
