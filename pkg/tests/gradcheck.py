"""Random-instance gradient checks shared by the unit and acceptance tests.

Each ``*_errors`` function draws ``n`` random instances and returns the
relative error between the analytic gradient and central differences.
"""
import numpy as np

from seqrl.policy import MarkovPolicy, MutationBatch, MutationPolicy, PositionCategoricalPolicy
from seqrl.rl import LinearValue, PreferencePair, dpo_loss, entropy_term, grpo_loss, kl_penalty, ppo_loss, value_loss

from oracles import central_diff, rel_error

SEQ_KINDS = ("position", "markov")
ALL_KINDS = SEQ_KINDS + ("mutation",)


def random_seq_policy(rng, kind):
    if kind == "position":
        return PositionCategoricalPolicy(rng.normal(size=(3, 4)))
    return MarkovPolicy(rng.normal(size=4), rng.normal(size=(4, 4)), 3)


def random_mutation_batch(rng, n=6, length=5, a=5):
    pol = MutationPolicy(rng.normal(size=length), rng.normal(size=(length, a)))
    wt = rng.integers(0, a, length)
    states, poss, ress, masks = [], [], [], []
    for _ in range(n):
        s = wt.copy()
        j = rng.integers(0, length)
        s[j] = (wt[j] + 1) % a
        mask = rng.random(length) < 0.7
        mask[j] = True
        p = int(rng.choice(np.flatnonzero(mask)))
        allowed = [r for r in range(a) if r != s[p] and r != wt[p]]
        states.append(s)
        poss.append(p)
        ress.append(int(rng.choice(allowed)))
        masks.append(mask)
    batch = MutationBatch(np.array(states), poss, ress, wt, np.array(masks),
                          rng.uniform(0.5, 1.5, n), rng.uniform(0.5, 1.5, n))
    return pol, batch


def fd_error(policy, f, grad):
    def g(theta):
        return f(policy.copy().set_params(theta))

    return rel_error(grad, central_diff(g, policy.params))


def _policy_and_samples(rng, kind, n=6):
    if kind == "mutation":
        return random_mutation_batch(rng, n)
    return random_seq_policy(rng, kind), None


def dpo_errors(kind, n=100, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        if kind == "mutation":
            pol, batch = random_mutation_batch(rng, 8)
            ref = pol.copy().set_params(pol.params + rng.normal(0, 0.3, pol.n_params))
            items = [batch.subset(np.arange(i, i + 2)) for i in range(0, 8, 2)]
            pairs = [PreferencePair(0, items[0], items[1]), PreferencePair(0, items[2], items[3])]
        else:
            pol, ref = random_seq_policy(rng, kind), random_seq_policy(rng, kind)
            seqs = rng.integers(0, 4, (6, 3))
            seqs[1::2, 0] = (seqs[::2, 0] + 1) % 4
            pairs = [PreferencePair(0, seqs[i], seqs[i + 1]) for i in range(0, 6, 2)]
        beta, lam = rng.uniform(0.1, 2), rng.uniform(0, 1.5)
        _, grad = dpo_loss(pol, ref, pairs, beta, lam)
        out.append(fd_error(pol, lambda p: dpo_loss(p, ref, pairs, beta, lam)[0], grad))
    return out


def ppo_instance(rng, kind, eps=0.2):
    """Random instance whose ratios sit away from the clip kinks."""
    while True:
        if kind == "mutation":
            pol, samples = random_mutation_batch(rng, 8)
        else:
            pol = random_seq_policy(rng, kind)
            samples = rng.integers(0, 4, (8, 3))
        lp = pol.log_prob_batch(samples)
        old = lp + rng.normal(0, 0.3, lp.size)
        adv = rng.normal(size=lp.size)
        ratio = np.exp(lp - old)
        if np.min(np.abs(np.concatenate([ratio - 1 - eps, ratio - 1 + eps]))) > 1e-3:
            return pol, samples, old, adv


def ppo_errors(kind, n=100, seed=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pol, samples, old, adv = ppo_instance(rng, kind)
        ref = pol.copy().set_params(pol.params + rng.normal(0, 0.2, pol.n_params))
        kl_coeff = rng.uniform(0, 2)
        _, grad, _ = ppo_loss(pol, old, samples, adv, 0.2, kl_coeff, ref, kl_clamp=100.0)
        out.append(fd_error(pol, lambda p: ppo_loss(p, old, samples, adv, 0.2, kl_coeff, ref, 100.0)[0], grad))
    return out


def grpo_errors(kind, n=100, seed=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pol, samples, old, _ = ppo_instance(rng, kind)
        group_rewards = rng.normal(size=(2, 4))
        rank = bool(rng.integers(0, 2))
        _, grad, _ = grpo_loss(pol, old, samples, group_rewards, 0.2, rank_normalize=rank)
        out.append(fd_error(pol, lambda p: grpo_loss(p, old, samples, group_rewards, 0.2,
                                                     rank_normalize=rank)[0], grad))
    return out


def value_errors(n=100, seed=4):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        v = LinearValue(4, 3, use_state=bool(rng.integers(0, 2)))
        v.set_params(rng.normal(size=v.n_params))
        states = rng.integers(0, 3, (7, 4))
        returns = rng.normal(size=7)
        _, grad = value_loss(v, states, returns)

        def f(w):
            return value_loss(LinearValue(4, 3, v.use_state).set_params(w), states, returns)[0]

        out.append(rel_error(grad, central_diff(f, v.params)))
    return out


def kl_errors(kind, n=100, seed=5):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pol, samples = _policy_and_samples(rng, kind)
        ref = pol.copy().set_params(pol.params + rng.normal(0, 0.5, pol.n_params))
        _, grad = kl_penalty(pol, ref, samples, clamp=1e6)
        out.append(fd_error(pol, lambda p: kl_penalty(p, ref, samples, 1e6)[0], grad))
    return out


def entropy_errors(kind, n=100, seed=6):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pol, samples = _policy_and_samples(rng, kind)
        _, grad = entropy_term(pol, samples)
        out.append(fd_error(pol, lambda p: entropy_term(p, samples)[0], grad))
    return out


def gradient_suite(n=100):
    """Worst relative error per loss over ``n`` instances of every policy family."""
    return {
        "dpo": max(max(dpo_errors(k, n)) for k in ALL_KINDS),
        "ppo": max(max(ppo_errors(k, n)) for k in ALL_KINDS),
        "grpo": max(max(grpo_errors(k, n)) for k in ("position", "mutation")),
        "value": max(value_errors(n)),
        "kl": max(max(kl_errors(k, n)) for k in ALL_KINDS),
        "entropy": max(max(entropy_errors(k, n)) for k in ALL_KINDS),
    }
