"""Desk-scale simulator for federated learning with personalized classifier anchors."""

__version__ = "0.1.0"
