"""Desk-scale simulator for client drift and catastrophic forgetting under FedAvg."""

__version__ = "0.1.0"
