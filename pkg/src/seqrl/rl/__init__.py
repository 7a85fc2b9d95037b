"""Preference and policy-gradient fine-tuning."""
from ..envs import Trajectory
from .advantages import gae, grpo_advantages, standardize
from .losses import (
    LinearValue,
    clipped_surrogate,
    combined_loss,
    dpo_loss,
    entropy_term,
    grpo_loss,
    kl_penalty,
    ppo_loss,
    score,
    score_items,
    value_loss,
)
from .optim import SGD, Adam, make_optimizer
from .train import TrainingReport, build_preference_pairs, train
from .types import PreferencePair, RLConfig

__all__ = [
    "Adam", "LinearValue", "PreferencePair", "RLConfig", "SGD", "TrainingReport", "Trajectory",
    "build_preference_pairs", "clipped_surrogate", "combined_loss", "dpo_loss", "entropy_term", "gae",
    "grpo_advantages", "grpo_loss", "kl_penalty", "make_optimizer", "ppo_loss", "score", "score_items",
    "standardize", "train", "value_loss",
]
