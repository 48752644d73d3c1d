"""Networks, PPO losses and training loops for the hedging agents."""
from .agent import Agent, GaussianPolicy, VarHead
from .losses import (
    clip_grad,
    clipped_surrogate,
    entropy_loss,
    gae,
    lr_at,
    pinball_loss,
    rewards_to_go,
    value_loss,
)
from .nets import DenseNet, RunningNormalizer, swish
from .train import (
    ContractSampler,
    MixtureSampler,
    PoolSampler,
    PretrainConfig,
    TrainConfig,
    TrainResult,
    combined_loss,
    evaluate,
    pretrain_initializer,
    train_cs,
    train_cu,
)

__all__ = [
    "Agent", "GaussianPolicy", "VarHead", "DenseNet", "RunningNormalizer", "swish",
    "clip_grad", "clipped_surrogate", "entropy_loss", "gae", "lr_at", "pinball_loss",
    "rewards_to_go", "value_loss", "ContractSampler", "MixtureSampler", "PoolSampler", "PretrainConfig",
    "TrainConfig", "TrainResult", "combined_loss", "evaluate", "pretrain_initializer",
    "train_cs", "train_cu",
]
