"""Attention-based deep Q-learning for capacitated and multi-depot vehicle routing."""

from .instances import Instance, default_capacity, generate_dataset, generate_instance, load_dataset, save_dataset
from .qnet import ModelConfig, QNetwork
from .search import Solution, solve_greedy, solve_sampling

__all__ = [
    "Instance",
    "ModelConfig",
    "QNetwork",
    "Solution",
    "default_capacity",
    "generate_dataset",
    "generate_instance",
    "load_dataset",
    "save_dataset",
    "solve_greedy",
    "solve_sampling",
]
