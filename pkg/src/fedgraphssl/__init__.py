"""Federated semi-supervised graph learning on patient similarity graphs."""

__version__ = "0.1.0"
