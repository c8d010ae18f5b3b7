"""Delayed factored crafting worlds with causal discovery, delay learning and hierarchical RL."""

from .world import World, WorldConfig, discretize_delay, make_task, task_spec

__all__ = ["World", "WorldConfig", "discretize_delay", "make_task", "task_spec"]
__version__ = "0.1.0"
