"""Small end-to-end experiments on synthetic landscapes.

These drive the directional checks: base versus fine-tuned pass@1, and the
sweep over reward accuracy (corruption rate), task difficulty
(high-fitness fraction) and policy capacity (policy family).
"""
from __future__ import annotations

from itertools import product

import numpy as np

from .core import RngStream
from .exceptions import InvalidInput
from .policy import MarkovPolicy, PositionCategoricalPolicy
from .rewards import NoisyOracle, make_phoq_like
from .rl.train import train
from .rl.types import RLConfig


def uniform_policy(family, length, alphabet_size):
    if family == "position_categorical":
        return PositionCategoricalPolicy(np.zeros((length, alphabet_size)))
    if family == "markov":
        return MarkovPolicy(np.zeros(alphabet_size), np.zeros((alphabet_size, alphabet_size)), length)
    raise InvalidInput(f"unknown family {family!r}")


def _check_complete(land, policy):
    if len(land) != policy.alphabet_size ** policy.length:
        raise InvalidInput("exact metrics need a complete table over the policy's sequence space")


def exact_success_rate(policy, land, threshold):
    """Probability that one sample from ``policy`` clears ``threshold`` (exact pass@1)."""
    _check_complete(land, policy)
    p = np.exp(policy.log_prob_table())
    return float(p[land.values() >= threshold].sum())


def expected_fitness(policy, land):
    _check_complete(land, policy)
    return float(np.exp(policy.log_prob_table()) @ land.values())


def run_generation(algo, seed, steps=100, cfg=None, family="position_categorical", corruption_rate=0.0,
                   noise_sd=0.0, high_fraction=0.01, landscape=None):
    """Fine-tune a uniform policy on a phoq-like landscape; returns a result dict."""
    land = landscape if landscape is not None else make_phoq_like(seed=seed, high_fraction=high_fraction)
    threshold = land.success_threshold
    reward = land
    if corruption_rate or noise_sd:
        reward = NoisyOracle(land, noise_sd, corruption_rate, RngStream(seed, 11), threshold=threshold)
    policy = uniform_policy(family, land.wild_type.size, land.alphabet_size)
    base_rate = exact_success_rate(policy, land, threshold)
    report = train(policy, algo, None, reward, cfg or RLConfig(), steps, RngStream(seed))
    return {
        "algo": algo, "seed": seed, "family": family, "corruption_rate": corruption_rate,
        "high_fraction": high_fraction, "base_pass1": base_rate,
        "tuned_pass1": exact_success_rate(policy, land, threshold),
        "true_fitness": expected_fitness(policy, land), "policy": policy, "report": report, "landscape": land,
    }


def sweep(algo, seeds, corruption_rates=(0.0,), high_fractions=(0.01,), families=("position_categorical",),
          steps=100, cfg=None):
    """Grid over the three factors; one row (without the heavy objects) per run."""
    rows = []
    for rate, frac, fam in product(corruption_rates, high_fractions, families):
        for seed in seeds:
            res = run_generation(algo, seed, steps, cfg, fam, rate, high_fraction=frac)
            rows.append({k: v for k, v in res.items() if k not in ("policy", "report", "landscape")})
    return rows


def summarize(rows, by, metric):
    """Mean of ``metric`` grouped by the ``by`` key, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault(r[by], []).append(r[metric])
    return {k: float(np.mean(v)) for k, v in groups.items()}
