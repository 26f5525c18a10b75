"""Standalone peer that joins a federated community over TCP, downloads
the model, trains a linear model with its own tooling, and contributes
weights back. Shares nothing with the main runtime but the wire format."""

__version__ = "0.1.0"
