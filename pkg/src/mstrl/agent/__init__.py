"""Actor-critic agent with a self-supervised encoder and per-module regimes."""
from .agent import (Agent, AgentConfig, MstAssignment, ModuleConfig, config_from_dict,
                    module_param_counts, read_checkpoint)
from .losses import LossWeights, two_hot_encode
from .replay import ReplayBuffer, update_reward_scale

__all__ = ["Agent", "AgentConfig", "LossWeights", "ModuleConfig", "MstAssignment", "ReplayBuffer",
           "config_from_dict", "module_param_counts", "read_checkpoint", "two_hot_encode", "update_reward_scale"]
