"""Chest PPG restoration with a cycle-consistent GAN."""

__version__ = "0.1.0"
