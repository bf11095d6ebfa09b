"""Obstacle shape optimisation with single-step PPO episodes and a 2D flow solver."""

__version__ = "0.1.0"
