"""polcon: continual reinforcement learning via policy consolidation.

A cascade of KL-coupled policy networks at exponentially spaced
timescales, PPO baselines, a multi-timescale synaptic consolidation
model, deterministic toy environments and an experiment harness.
"""

__version__ = "0.1.0"

from .cascade import CascadeAgent, CascadeConfig
from .config import ConfigError, ExperimentConfig, load_config
from .diffnet import NetworkSpec
from .ppo import PpoAgent, PpoConfig
from .synapse import BeakerChain, default_chain

__all__ = [
    "BeakerChain",
    "CascadeAgent",
    "CascadeConfig",
    "ConfigError",
    "ExperimentConfig",
    "NetworkSpec",
    "PpoAgent",
    "PpoConfig",
    "default_chain",
    "load_config",
    "__version__",
]
