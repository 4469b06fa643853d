"""Adversarial training of multi-exit networks with neighbor and exit-wise orthogonal distillation."""

__version__ = "0.1.0"
