"""Drift-triggered transfer-learning updates for feedforward regression models."""

__version__ = "0.1.0"
