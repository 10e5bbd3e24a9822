"""Differentiable reinforcement learning for trading with transaction costs."""

__version__ = "0.1.0"
