"""Federated-learning simulator with persistent masked-parameter backdoor attacks."""

__version__ = "0.1.0"
