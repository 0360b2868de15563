"""Federated learning simulation with covariance-preconditioned optimizers."""

__version__ = "0.1.0"
