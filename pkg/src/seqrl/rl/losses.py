"""RL objectives with analytic gradients.

Every loss returns its value together with the gradient with respect to
the policy's flat parameter vector (``policy.params``).
"""
from __future__ import annotations

import numpy as np

from ..exceptions import InvalidInput
from ..policy import MutationBatch, MutationPolicy

RATIO_EXP_CLAMP = 20.0


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def score(policy, samples):
    """Log-probabilities and per-sample gradients of ``samples`` under ``policy``.

    ``samples`` is an ``(N, L)`` token array for sequence policies or a
    :class:`MutationBatch` for mutation policies.
    """
    return policy.log_prob_batch(samples), policy.grad_log_prob_batch(samples)


def score_items(policy, items):
    """Total log-probability (and gradient) of each item.

    A token array scores as one sequence; a :class:`MutationBatch` scores
    as a whole trajectory (sum over its steps).
    """
    if all(isinstance(it, MutationBatch) for it in items):
        batch = MutationBatch.concatenate(items)
        lp, g = score(policy, batch)
        owner = np.repeat(np.arange(len(items)), [len(it) for it in items])
        lp_items = np.bincount(owner, weights=lp, minlength=len(items))
        g_items = np.zeros((len(items), g.shape[1]))
        np.add.at(g_items, owner, g)
        return lp_items, g_items
    seqs = np.stack([np.asarray(it, dtype=np.int64) for it in items])
    return score(policy, seqs)


def dpo_loss(policy, reference, pairs, beta=0.5, reg_lambda=1.0):
    """Preference loss with a supervised term on the winners.

    Per pair: ``-log sigmoid(beta * (d_w - d_l)) - reg_lambda * log pi(w)``
    with ``d_x = log pi(x) - log pi_ref(x)``; averaged over pairs.
    ``reg_lambda = 0`` gives plain DPO.  Returns ``(loss, grad)``.
    """
    if not pairs:
        raise InvalidInput("dpo_loss needs at least one preference pair")
    winners = [p.winner for p in pairs]
    losers = [p.loser for p in pairs]
    lp_w, g_w = score_items(policy, winners)
    lp_l, g_l = score_items(policy, losers)
    ref_w, _ = score_items(reference, winners)
    ref_l, _ = score_items(reference, losers)
    margin = beta * ((lp_w - ref_w) - (lp_l - ref_l))
    losses = -_log_sigmoid(margin) - reg_lambda * lp_w
    n = len(pairs)
    coef = -(1.0 - _sigmoid(margin)) * beta
    grad = (coef[:, None] * (g_w - g_l)).sum(axis=0) / n - reg_lambda * g_w.sum(axis=0) / n
    return float(losses.mean()), grad


def preference_margins(policy, reference, pairs, beta=0.5):
    lp_w, _ = score_items(policy, [p.winner for p in pairs])
    lp_l, _ = score_items(policy, [p.loser for p in pairs])
    ref_w, _ = score_items(reference, [p.winner for p in pairs])
    ref_l, _ = score_items(reference, [p.loser for p in pairs])
    return beta * ((lp_w - ref_w) - (lp_l - ref_l))


def kl_penalty(policy, reference, samples=None, clamp=10.0):
    """Exact KL(policy || reference), clamped at ``clamp``; returns ``(kl, grad)``.

    For mutation policies the KL is the mean residue-distribution KL over
    the mutated sites in ``samples``; for sequence policies it is the exact
    KL over whole sequences.  Once the clamp binds the gradient is zero.
    """
    if isinstance(policy, MutationPolicy):
        if samples is None or len(samples) == 0:
            return 0.0, np.zeros(policy.n_params)
        kl, grad = policy.residue_kl(reference, samples)
    else:
        kl, grad = policy.kl_divergence(reference)
    kl = max(kl, 0.0)
    if kl > clamp:
        return float(clamp), np.zeros_like(grad)
    return float(kl), grad


def entropy_term(policy, samples=None):
    """Exploration entropy and its gradient.

    Mutation policies use the masked position distribution averaged over
    the masks in ``samples``; sequence policies use the sequence entropy.
    """
    if isinstance(policy, MutationPolicy):
        if samples is None or len(samples) == 0:
            return 0.0, np.zeros(policy.n_params)
        return policy.position_entropy(samples.masks)
    return policy.entropy()


def clipped_surrogate(log_probs, grads, old_log_probs, advantages, clip_eps):
    """``-mean(min(rho * A, clip(rho, 1-eps, 1+eps) * A))`` and its gradient.

    The log-ratio is clamped to +-20 before exponentiation; samples whose
    log-ratio hits the clamp, or whose clipped branch is active, contribute
    no gradient.
    """
    advantages = np.asarray(advantages, dtype=float)
    old_log_probs = np.asarray(old_log_probs, dtype=float)
    if not np.all(np.isfinite(advantages)):
        raise InvalidInput("advantages must be finite")
    if advantages.shape != log_probs.shape or old_log_probs.shape != log_probs.shape:
        raise InvalidInput("advantages and log-probabilities must align")
    raw = log_probs - old_log_probs
    log_ratio = np.clip(raw, -RATIO_EXP_CLAMP, RATIO_EXP_CLAMP)
    ratio = np.exp(log_ratio)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    n = log_probs.size
    loss = -np.minimum(unclipped, clipped).mean()
    active = (unclipped <= clipped) & (np.abs(raw) < RATIO_EXP_CLAMP)
    coef = np.where(active, -advantages * ratio / n, 0.0)
    grad = coef @ grads
    diagnostics = {
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl_old": float(np.mean(old_log_probs - log_probs)),
        "ratio_mean": float(ratio.mean()),
    }
    return float(loss), grad, diagnostics


def ppo_loss(policy, old_log_probs, samples, advantages, clip_eps=0.2, kl_coeff=0.0, ref_policy=None,
             kl_clamp=10.0):
    """Clipped PPO surrogate plus ``kl_coeff`` times the clamped KL to ``ref_policy``.

    Returns ``(loss, grad, diagnostics)``; diagnostics include the
    clipped fraction and the KL value.
    """
    lp, g = score(policy, samples)
    loss, grad, diag = clipped_surrogate(lp, g, old_log_probs, advantages, clip_eps)
    diag["policy_loss"] = loss
    kl = 0.0
    if ref_policy is not None:
        kl, kl_grad = kl_penalty(policy, ref_policy, samples, kl_clamp)
        if kl_coeff:
            loss += kl_coeff * kl
            grad = grad + kl_coeff * kl_grad
    diag["kl"] = kl
    return loss, grad, diag


def grpo_loss(policy, old_log_probs, samples, group_rewards, clip_eps=0.2, kl_coeff=0.0,
              ref_policy=None, kl_clamp=10.0, rank_normalize=False):
    """GRPO: the clipped surrogate with group-relative advantages.

    ``group_rewards`` is an ``(n_groups, group_size)`` array aligned with
    ``samples`` in row-major order.
    """
    from .advantages import grpo_advantages

    group_rewards = np.atleast_2d(np.asarray(group_rewards, dtype=float))
    adv = np.concatenate([grpo_advantages(g, rank_normalize) for g in group_rewards])
    return ppo_loss(policy, old_log_probs, samples, adv, clip_eps, kl_coeff, ref_policy, kl_clamp)


class LinearValue:
    """Linear value function over one-hot state features plus a bias.

    With ``use_state=False`` only the bias is used, which makes it a
    learned scalar baseline for single-step (sequence-level) episodes.
    """

    def __init__(self, length, alphabet_size, use_state=True):
        self.length = int(length)
        self.alphabet_size = int(alphabet_size)
        self.use_state = bool(use_state)
        self.weights = np.zeros(self.length * self.alphabet_size + 1 if use_state else 1)

    @property
    def n_params(self):
        return self.weights.size

    @property
    def params(self):
        return self.weights.copy()

    def set_params(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != self.weights.shape:
            raise InvalidInput(f"expected {self.weights.size} value parameters")
        self.weights = params.copy()
        return self

    def features(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        n = states.shape[0]
        if not self.use_state:
            return np.ones((n, 1))
        phi = np.zeros((n, self.weights.size))
        cols = np.arange(self.length)[None, :] * self.alphabet_size + states
        phi[np.arange(n)[:, None], cols] = 1.0
        phi[:, -1] = 1.0
        return phi

    def predict(self, states):
        return self.features(states) @ self.weights

    def __call__(self, state):
        return float(self.predict(np.asarray(state)[None, :])[0])


def value_loss(value, states, returns):
    """Mean squared error between predicted values and returns, with gradient."""
    phi = value.features(states)
    resid = phi @ value.weights - np.asarray(returns, dtype=float)
    return float(np.mean(resid ** 2)), 2.0 * phi.T @ resid / resid.size


def combined_loss(policy_loss, kl, value_loss, pos_entropy, cfg):
    """``policy + alpha*KL + beta*value -/+ gamma*entropy``.

    The entropy enters as a bonus (subtracted) when ``cfg.entropy_bonus``
    is set, and is added otherwise.
    """
    sign = -1.0 if cfg.entropy_bonus else 1.0
    return (policy_loss + cfg.kl_coeff * kl + cfg.value_coeff * value_loss
            + sign * cfg.entropy_coeff * pos_entropy)
