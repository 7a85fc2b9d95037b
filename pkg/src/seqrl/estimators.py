"""scikit-learn style wrapper around :func:`seqrl.rl.train`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import RngStream
from .exceptions import InvalidConfig, InvalidInput
from .policy import MarkovPolicy, PositionCategoricalPolicy
from .rewards import RewardOracle
from .rl.train import train
from .rl.types import RLConfig


def check_sequences(X, alphabet_size=None, length=None):
    """Validate a 2-D integer token matrix and return it as int64."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInput(f"expected a non-empty 2-D token array, got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        raise InvalidInput("tokens must be integers")
    if length is not None and X.shape[1] != length:
        raise InvalidInput(f"expected sequences of length {length}, got {X.shape[1]}")
    if alphabet_size is not None and (X.min() < 0 or X.max() >= alphabet_size):
        raise InvalidInput(f"tokens must lie in [0, {alphabet_size})")
    return X.astype(np.int64)


class LookupReward(RewardOracle):
    """Reward from labeled ``(X, y)``; unlabeled sequences score ``default``."""

    def __init__(self, X, y, default=0.0):
        self.table = {tuple(x): float(v) for x, v in zip(X, y)}
        self.default = float(default)

    def __call__(self, seq):
        return self.table.get(tuple(int(t) for t in seq), self.default)

    def batch(self, seqs):
        return np.array([self(s) for s in np.atleast_2d(seqs)])


class PolicyFineTuner(BaseEstimator):
    """Fine-tune a small sequence generator against a reward.

    ``fit(X, y)`` treats the labeled sequences as the reward table;
    ``fit(reward=oracle)`` trains against an arbitrary oracle.
    """

    def __init__(self, algo="grpo", family="position_categorical", length=4, alphabet_size=20, steps=100,
                 batch_size=64, learning_rate=0.05, kl_coeff=20.0, entropy_coeff=0.01, group_size=8,
                 random_state=0):
        self.algo = algo
        self.family = family
        self.length = length
        self.alphabet_size = alphabet_size
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.kl_coeff = kl_coeff
        self.entropy_coeff = entropy_coeff
        self.group_size = group_size
        self.random_state = random_state

    def _init_policy(self):
        a, length = self.alphabet_size, self.length
        if self.family == "position_categorical":
            return PositionCategoricalPolicy(np.zeros((length, a)))
        if self.family == "markov":
            return MarkovPolicy(np.zeros(a), np.zeros((a, a)), length)
        raise InvalidConfig(f"unsupported family {self.family!r}")

    def fit(self, X=None, y=None, reward=None):
        if reward is None:
            if X is None or y is None:
                raise InvalidInput("pass labeled (X, y) or a reward oracle")
            X = check_sequences(X, self.alphabet_size, self.length)
            y = np.asarray(y, dtype=float)
            if y.shape != (X.shape[0],):
                raise InvalidInput("y must have one value per sequence")
            reward = LookupReward(X, y)
        cfg = RLConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, kl_coeff=self.kl_coeff,
                       entropy_coeff=self.entropy_coeff, group_size=self.group_size)
        self.policy_ = self._init_policy()
        self.report_ = train(self.policy_, self.algo, None, reward, cfg, self.steps, RngStream(self.random_state))
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError("call fit() first")

    def sample(self, n, random_state=None, temperature=1.0, top_p=1.0):
        self._check_fitted()
        seed = self.random_state if random_state is None else random_state
        return self.policy_.sample(n, RngStream(seed, 1), temperature, top_p)

    def score_samples(self, X):
        """Log-probability of each row of ``X`` under the fitted policy."""
        self._check_fitted()
        return self.policy_.log_prob_batch(check_sequences(X, self.alphabet_size, self.length))
