"""Meta-guided gradient-free reinforcement learning for critical load restoration."""

__version__ = "0.1.0"
