"""Distributed backdoor attacks with topology detection in decentralized federated learning."""

__version__ = "0.1.0"
