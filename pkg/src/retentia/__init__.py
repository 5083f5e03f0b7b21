"""Retentive-relevance survey signal tooling."""
__version__ = "0.1.0"
