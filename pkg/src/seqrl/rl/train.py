"""The parameter-update loop for PPO, GRPO and (multi-round) DPO.

Three task shapes are supported:

* generation -- ``env_or_pairs is None``: sequences are sampled from a
  sequence policy and each whole sequence is one action;
* mutation -- ``env_or_pairs`` is a :class:`~seqrl.envs.MutationEnv`:
  step-level episodes with GAE;
* offline DPO -- ``env_or_pairs`` is a list of :class:`PreferencePair`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import io
import json
import math

import numpy as np

from ..core import RngStream
from ..envs import AnnealSchedule, MutationEnv, rollout
from ..exceptions import DivergedError, InvalidConfig
from ..policy import MutationBatch, MutationPolicy
from .advantages import gae, grpo_advantages, standardize
from .losses import (
    LinearValue,
    clipped_surrogate,
    combined_loss,
    dpo_loss,
    entropy_term,
    kl_penalty,
    preference_margins,
    score,
    value_loss,
)
from .optim import clip_grad_norm, make_optimizer
from .types import PreferencePair, RLConfig

ALGORITHMS = ("ppo", "grpo", "dpo")
REPORT_FIELDS = (
    "step", "loss", "policy_loss", "kl", "value_loss", "entropy", "clip_fraction",
    "mean_reward", "max_reward", "n_pairs", "temperature",
)


@dataclass
class TrainingReport:
    algo: str
    policy: object
    value: LinearValue | None = None
    records: list = field(default_factory=list)

    @property
    def mean_rewards(self):
        return np.array([r["mean_reward"] for r in self.records], dtype=float)

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for r in self.records:
            writer.writerow([_fmt(r.get(k)) for k in REPORT_FIELDS])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def build_preference_pairs(items, rewards, quantile=0.25, context_id=0):
    """Pair the top ``quantile`` of ``items`` with the bottom ``quantile``.

    The best item is paired with the worst, the second best with the
    second worst, and so on; pairs with tied rewards are dropped.
    """
    rewards = np.asarray(rewards, dtype=float)
    n = rewards.size
    q = max(1, int(math.floor(quantile * n)))
    order = np.argsort(-rewards, kind="stable")
    top, bottom = order[:q], order[::-1][:q]
    pairs = []
    for w, l in zip(top, bottom):
        if w == l or rewards[w] <= rewards[l]:
            continue
        wi, li = items[w], items[l]
        if isinstance(wi, np.ndarray) and np.array_equal(wi, li):
            continue
        pairs.append(PreferencePair(context_id, wi, li))
    return pairs


class _Learner:
    """Single-writer parameter state: policy (+ optional value) and optimizer."""

    def __init__(self, policy, value, cfg):
        self.policy = policy
        self.value = value
        self.cfg = cfg
        self.opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
        self.last_good = self.params()

    def params(self):
        if self.value is None:
            return self.policy.params
        return np.concatenate([self.policy.params, self.value.params])

    def set(self, params):
        n = self.policy.n_params
        self.policy.set_params(params[:n])
        if self.value is not None:
            self.value.set_params(params[n:])

    def update(self, step, loss, g_policy, g_value=None):
        if not math.isfinite(loss):
            self._diverge(step, f"non-finite loss {loss!r}")
        grad = g_policy if self.value is None else np.concatenate(
            [g_policy, g_value if g_value is not None else np.zeros(self.value.n_params)])
        grad = clip_grad_norm(grad, self.cfg.max_grad_norm)
        new = self.opt.step(self.params(), grad)
        if not np.all(np.isfinite(new)):
            self._diverge(step, "non-finite parameters after update")
        self.set(new)
        self.last_good = new

    def _diverge(self, step, msg):
        self.set(self.last_good)
        raise DivergedError(f"training diverged at step {step}: {msg}", step=step, last_good=self.last_good.copy())


def _policy_step(learner, step, samples, old_lp, adv, anchor, cfg, states=None, targets=None):
    """One optimizer step on the combined clipped objective."""
    policy = learner.policy
    if not np.all(np.isfinite(adv)):
        learner._diverge(step, "non-finite advantages")
    lp, g = score(policy, samples)
    pol_loss, g_pol, diag = clipped_surrogate(lp, g, old_lp, adv, cfg.clip_eps)
    kl, g_kl = kl_penalty(policy, anchor, samples, cfg.kl_clamp) if cfg.kl_coeff else (0.0, 0.0)
    ent, g_ent = entropy_term(policy, samples) if cfg.entropy_coeff else (0.0, 0.0)
    vl, g_v = (0.0, None)
    if learner.value is not None and targets is not None:
        vl, g_v = value_loss(learner.value, states, targets)
        g_v = cfg.value_coeff * g_v
    total = combined_loss(pol_loss, kl, vl, ent, cfg)
    sign = -1.0 if cfg.entropy_bonus else 1.0
    grad = g_pol + cfg.kl_coeff * g_kl + sign * cfg.entropy_coeff * g_ent
    learner.update(step, total, np.broadcast_to(grad, (policy.n_params,)).astype(float), g_v)
    return {"loss": total, "policy_loss": pol_loss, "kl": kl, "value_loss": vl, "entropy": ent,
            "clip_fraction": diag["clip_fraction"]}


class _ReturnScaler:
    """Keeps the value model in standardized-return units across updates."""

    def __init__(self, enabled):
        self.enabled = enabled
        self.mean, self.std = 0.0, 1.0

    def to_raw(self, v):
        return v * self.std + self.mean if self.enabled else v

    def targets(self, returns):
        if not self.enabled:
            return returns
        out = standardize(returns)
        self.mean, self.std = float(returns.mean()), float(returns.std() + 1e-8)
        return out


def _normalize_adv(adv, cfg):
    if cfg.rank_normalize and adv.size >= 2:
        return grpo_advantages(adv, rank_normalize=True)
    if cfg.normalize_advantages and adv.size >= 2:
        return standardize(adv)
    return adv


def train(policy, algo, env_or_pairs=None, reward=None, cfg=None, steps=100, rng=None, reference=None,
          value=None, schedule=None, callback=None):
    """Fine-tune ``policy`` in place and return a :class:`TrainingReport`.

    Parameters
    ----------
    policy : sequence or mutation policy
    algo : {"ppo", "grpo", "dpo"}
    env_or_pairs : MutationEnv, list of PreferencePair, or None
        Selects the mutation, offline-DPO or generation task.
    reward : oracle
        Required unless training offline DPO.
    cfg : RLConfig
    steps : int
        Optimizer updates (PPO/GRPO) or DPO rounds.
    reference : policy, optional
        Frozen KL anchor; defaults to a copy of the initial policy.  For
        multi-round DPO the reference is re-snapshotted every round.
    schedule : AnnealSchedule, optional
        Temperature schedule for mutation rollouts.
    callback : callable, optional
        Called with each step record.
    """
    algo = algo.lower()
    if algo not in ALGORITHMS:
        raise InvalidConfig(f"algo must be one of {ALGORITHMS}, got {algo!r}")
    cfg = cfg or RLConfig()
    rng = rng or RngStream(0)
    offline = isinstance(env_or_pairs, (list, tuple))
    mutation = isinstance(env_or_pairs, MutationEnv)
    if offline and algo != "dpo":
        raise InvalidConfig("preference pairs can only train DPO")
    if not offline and reward is None and not mutation:
        raise InvalidConfig("a reward oracle is required")
    if mutation != isinstance(policy, MutationPolicy):
        raise InvalidConfig("mutation environments need a MutationPolicy and vice versa")
    reference = reference.copy() if reference is not None else policy.copy()
    if algo == "ppo" and value is None:
        value = LinearValue(policy.length, policy.alphabet_size, use_state=mutation)
    learner = _Learner(policy, value if algo == "ppo" else None, cfg)
    report = TrainingReport(algo, policy, learner.value)
    scaler = _ReturnScaler(cfg.standardize_returns)
    schedule = schedule or AnnealSchedule(1.0, 1.0, 0)

    for step in range(steps):
        if offline:
            rec = _offline_dpo_step(learner, step, env_or_pairs, reference, cfg)
        elif mutation:
            env = env_or_pairs
            fn = {"ppo": _mutation_ppo_step, "grpo": _mutation_grpo_step, "dpo": _mutation_dpo_step}[algo]
            rec = fn(learner, step, env, reference, cfg, rng, schedule, scaler)
        else:
            fn = {"ppo": _generation_ppo_step, "grpo": _generation_grpo_step, "dpo": _generation_dpo_step}[algo]
            rec = fn(learner, step, reward, reference, cfg, rng, scaler)
        rec = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in rec.items()}
        rec["step"] = step
        report.records.append(rec)
        if callback is not None:
            callback(rec)
    return report


# -- generation task ---------------------------------------------------------


def _sample(policy, n, cfg, rng):
    return policy.sample(n, rng, cfg.sample_temperature, cfg.top_p)


def _generation_ppo_step(learner, step, reward, reference, cfg, rng, scaler):
    policy = learner.policy
    samples = _sample(policy, cfg.batch_size, cfg, rng)
    rewards = reward.batch(samples)
    old_lp = policy.log_prob_batch(samples)
    values = scaler.to_raw(learner.value.predict(samples))
    # single-step episodes: GAE reduces to r - V
    adv = rewards - values
    targets = scaler.targets(rewards)
    adv = _normalize_adv(adv, cfg)
    anchor = reference if cfg.kl_anchor == "reference" else policy.copy()
    for _ in range(cfg.ppo_epochs):
        rec = _policy_step(learner, step, samples, old_lp, adv, anchor, cfg, samples, targets)
    rec.update(mean_reward=rewards.mean(), max_reward=rewards.max())
    return rec


def _generation_grpo_step(learner, step, reward, reference, cfg, rng, scaler):
    policy = learner.policy
    n_groups = max(1, cfg.batch_size // cfg.group_size)
    samples = _sample(policy, n_groups * cfg.group_size, cfg, rng)
    rewards = reward.batch(samples)
    old_lp = policy.log_prob_batch(samples)
    adv = np.concatenate([grpo_advantages(g, cfg.rank_normalize)
                          for g in rewards.reshape(n_groups, cfg.group_size)])
    anchor = reference if cfg.kl_anchor == "reference" else policy.copy()
    for _ in range(cfg.ppo_epochs):
        rec = _policy_step(learner, step, samples, old_lp, adv, anchor, cfg)
    rec.update(mean_reward=rewards.mean(), max_reward=rewards.max())
    return rec


def _dpo_updates(learner, step, pairs, anchor, cfg):
    loss = float("nan")
    for _ in range(cfg.dpo_inner_steps):
        loss, grad = dpo_loss(learner.policy, anchor, pairs, cfg.dpo_beta, cfg.dpo_reg_lambda)
        learner.update(step, loss, grad)
    margin = float(preference_margins(learner.policy, anchor, pairs, cfg.dpo_beta).mean())
    return {"loss": loss, "policy_loss": loss, "kl": None, "value_loss": None, "entropy": None,
            "clip_fraction": None, "margin": margin, "n_pairs": len(pairs)}


def _generation_dpo_step(learner, step, reward, reference, cfg, rng, scaler):
    policy = learner.policy
    anchor = policy.copy()  # reference refreshed every round
    samples = _sample(policy, cfg.dpo_samples, cfg, rng)
    rewards = reward.batch(samples)
    pairs = build_preference_pairs(list(samples), rewards, cfg.dpo_quantile)
    if pairs:
        rec = _dpo_updates(learner, step, pairs, anchor, cfg)
    else:
        rec = {"loss": None, "n_pairs": 0}
    rec.update(mean_reward=rewards.mean(), max_reward=rewards.max())
    return rec


def _offline_dpo_step(learner, step, pairs, reference, cfg):
    return _dpo_updates(learner, step, list(pairs), reference, cfg)


# -- mutation task -------------------------------------------------------------


def _episodes(learner, env, n, step, schedule, rng, start_index=None):
    value_fn = None
    if learner.value is not None:
        value_fn = learner.value
    return [rollout(env, learner.policy, schedule, step, rng, value_fn, start_index, episode_id=i)
            for i in range(n)]


def _mutation_ppo_step(learner, step, env, reference, cfg, rng, schedule, scaler):
    policy = learner.policy
    trajs = _episodes(learner, env, cfg.batch_size, step, schedule, rng)
    adv_all, ret_all = [], []
    for tr in trajs:
        values = scaler.to_raw(np.asarray(tr.values))
        adv, ret = gae(tr.rewards, values, 0.0, cfg.gamma, cfg.gae_lambda)
        tr.advantages, tr.returns = adv.tolist(), ret.tolist()
        adv_all.append(adv)
        ret_all.append(ret)
    adv = _normalize_adv(np.concatenate(adv_all), cfg)
    targets = scaler.targets(np.concatenate(ret_all))
    batch = MutationBatch.concatenate([tr.to_batch() for tr in trajs])
    old_lp = np.concatenate([tr.log_probs_old for tr in trajs])
    anchor = reference if cfg.kl_anchor == "reference" else policy.copy()
    for _ in range(cfg.ppo_epochs):
        rec = _policy_step(learner, step, batch, old_lp, adv, anchor, cfg, batch.states, targets)
    finals = np.array([tr.final_fitness for tr in trajs])
    rec.update(mean_reward=finals.mean(), max_reward=finals.max(), temperature=schedule(step))
    return rec


def _mutation_grpo_step(learner, step, env, reference, cfg, rng, schedule, scaler):
    policy = learner.policy
    n_groups = max(1, cfg.batch_size // cfg.group_size)
    trajs, adv_steps = [], []
    for _ in range(n_groups):
        start = int(rng.integers(0, len(env.wild_type_pool)))
        group = _episodes(learner, env, cfg.group_size, step, schedule, rng, start)
        adv = grpo_advantages([sum(tr.rewards) for tr in group], cfg.rank_normalize)
        for tr, a in zip(group, adv):
            adv_steps.append(np.full(len(tr), a))
        trajs.extend(group)
    batch = MutationBatch.concatenate([tr.to_batch() for tr in trajs])
    old_lp = np.concatenate([tr.log_probs_old for tr in trajs])
    anchor = reference if cfg.kl_anchor == "reference" else policy.copy()
    for _ in range(cfg.ppo_epochs):
        rec = _policy_step(learner, step, batch, old_lp, np.concatenate(adv_steps), anchor, cfg)
    finals = np.array([tr.final_fitness for tr in trajs])
    rec.update(mean_reward=finals.mean(), max_reward=finals.max(), temperature=schedule(step))
    return rec


def _mutation_dpo_step(learner, step, env, reference, cfg, rng, schedule, scaler):
    anchor = learner.policy.copy()
    start = int(rng.integers(0, len(env.wild_type_pool)))
    trajs = _episodes(learner, env, cfg.dpo_samples, step, schedule, rng, start)
    finals = np.array([tr.final_fitness for tr in trajs])
    pairs = build_preference_pairs([tr.to_batch() for tr in trajs], finals, cfg.dpo_quantile, start)
    rec = _dpo_updates(learner, step, pairs, anchor, cfg) if pairs else {"loss": None, "n_pairs": 0}
    rec.update(mean_reward=finals.mean(), max_reward=finals.max(), temperature=schedule(step))
    return rec
