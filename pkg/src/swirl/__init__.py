"""Switching inverse reinforcement learning for discrete trajectories."""
__version__ = "0.1.0"
