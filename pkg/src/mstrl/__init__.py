"""Dynamic sparse training and module-specific training for actor-critic RL."""

__version__ = "0.1.0"
