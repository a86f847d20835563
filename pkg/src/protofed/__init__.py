"""Deterministic prototype-sharing federated learning with backdoor attacks."""

__version__ = "0.1.0"
