"""Personalized federated learning through a mixture of local and global models."""

__version__ = "0.1.0"
