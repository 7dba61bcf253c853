"""Preference reward learning with diffusion classifiers, plus offline RL on toy control tasks."""

__version__ = "0.1.0"
