"""Simulated clutter clearing with an affordance-quality metric and a DQN push policy."""

__version__ = "0.1.0"
