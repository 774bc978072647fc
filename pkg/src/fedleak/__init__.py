"""Federated training simulator with certified bounds on data-reconstruction error."""

__version__ = "0.1.0"
