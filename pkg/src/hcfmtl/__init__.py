"""Simulator for federated multi-task learning across clients with different task sets."""

__version__ = "0.1.0"
