"""Desk-scale planar singulation stack: physics, encoding, rewards,
episode environment, PPO trainer, scripted baseline, and evaluation CLI."""

__version__ = "0.1.0"
