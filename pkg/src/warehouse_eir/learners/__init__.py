"""Safe-MADDPG learners: replay, RND, AVFT and the training loop."""
from .avft import AvftModel, avft_q, rtg_init, rtg_update
from .maddpg import (
    VARIANTS,
    AgentNets,
    SafeMADDPG,
    TrainConfig,
    actor_update,
    canonical_variant,
    critic_update,
    train,
)
from .replay import ReplayBuffer
from .rnd import RndPair, combined_reward

__all__ = [
    "AgentNets", "AvftModel", "ReplayBuffer", "RndPair", "SafeMADDPG", "TrainConfig", "VARIANTS",
    "actor_update", "avft_q", "canonical_variant", "combined_reward", "critic_update", "rtg_init",
    "rtg_update", "train",
]
