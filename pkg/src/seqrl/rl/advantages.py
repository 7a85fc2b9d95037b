"""Advantage estimators: GAE and group-relative advantages."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ..exceptions import InvalidInput


def gae(rewards, values, bootstrap=0.0, gamma=0.99, lam=0.95):
    """Generalized advantage estimation over one episode.

    ``delta_t = r_t + gamma * V_{t+1} - V_t`` with ``V_T = bootstrap`` and
    ``A_t = delta_t + gamma * lam * A_{t+1}``.  Returns ``(advantages, returns)``
    with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise InvalidInput(f"rewards and values must be equal-length vectors, got {rewards.shape} and {values.shape}")
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise InvalidInput("gamma and lam must lie in [0, 1]")
    t_max = rewards.size
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * next_values - values
    adv = np.empty(t_max)
    running = 0.0
    for t in range(t_max - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def standardize(x, eps=1e-8):
    x = np.asarray(x, dtype=float)
    return (x - x.mean()) / (x.std() + eps)


def grpo_advantages(group_rewards, rank_normalize=False):
    """Mean-centred rewards within a group.

    With ``rank_normalize`` the rewards are first replaced by their average
    ranks mapped linearly onto [-1, 1].
    """
    r = np.asarray(group_rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise InvalidInput("a group needs at least two rewards")
    if not np.all(np.isfinite(r)):
        raise InvalidInput("group rewards must be finite")
    if rank_normalize:
        r = 2.0 * (rankdata(r, method="average") - 1.0) / (r.size - 1) - 1.0
    return r - r.mean()
