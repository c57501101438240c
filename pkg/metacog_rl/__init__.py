"""Metacog-RL: metacognitive hyperparameter adaptation for off-policy RL controllers."""

__version__ = "0.1.0"
