"""PLDA backend for i-vector speaker verification with weak session labels."""

__version__ = "0.1.0"
