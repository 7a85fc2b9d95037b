"""Training records and hyperparameters."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
import math

import numpy as np

from ..exceptions import InvalidConfig


@dataclass(frozen=True)
class PreferencePair:
    """A ranked pair: ``winner`` is preferred over ``loser`` for ``context_id``.

    Items are token arrays for sequence-level policies, or
    :class:`~seqrl.policy.MutationBatch` trajectories for mutation policies.
    """

    context_id: object
    winner: object
    loser: object

    def __post_init__(self):
        w, l = self.winner, self.loser
        if isinstance(w, np.ndarray) and isinstance(l, np.ndarray) and w.shape == l.shape and np.array_equal(w, l):
            raise InvalidConfig("winner and loser must differ")


@dataclass(frozen=True)
class RLConfig:
    clip_eps: float = 0.2
    kl_coeff: float = 20.0
    value_coeff: float = 0.4
    entropy_coeff: float = 0.01
    entropy_bonus: bool = True
    gamma: float = 0.99
    gae_lambda: float = 0.95
    dpo_beta: float = 0.5
    dpo_reg_lambda: float = 1.0
    dpo_quantile: float = 0.25
    dpo_samples: int = 64
    dpo_inner_steps: int = 1
    kl_clamp: float = 10.0
    kl_anchor: str = "reference"
    group_size: int = 8
    batch_size: int = 64
    ppo_epochs: int = 1
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    max_grad_norm: float | None = None
    rank_normalize: bool = False
    normalize_advantages: bool = True
    standardize_returns: bool = True
    sample_temperature: float = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if not (0 < self.clip_eps < 1):
            raise InvalidConfig("clip_eps must lie in (0, 1)")
        for name in ("gamma", "gae_lambda"):
            if not (0 <= getattr(self, name) <= 1):
                raise InvalidConfig(f"{name} must lie in [0, 1]")
        if not (0 < self.dpo_quantile <= 0.5):
            raise InvalidConfig("dpo_quantile must lie in (0, 0.5]")
        if self.group_size < 2:
            raise InvalidConfig("group_size must be >= 2")
        if self.batch_size < 1 or self.ppo_epochs < 1 or self.dpo_inner_steps < 1 or self.dpo_samples < 2:
            raise InvalidConfig("batch sizes and step counts must be positive")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise InvalidConfig("learning_rate must be a finite non-negative number")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfig("optimizer must be 'sgd' or 'adam'")
        if self.kl_anchor not in ("reference", "old"):
            raise InvalidConfig("kl_anchor must be 'reference' or 'old'")
        if self.kl_clamp <= 0:
            raise InvalidConfig("kl_clamp must be positive")

    def replace(self, **changes):
        return replace(self, **changes)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]
