"""Independent reference computations used to freeze and check expected values.

Everything here is written from the definitions, with plain loops and
without calling the package's own numerics.
"""
from fractions import Fraction
from itertools import product
import math

import numpy as np


def softmax_ref(logits, temperature=1.0):
    z = [x / temperature for x in logits]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def log_softmax_ref(logits):
    m = max(logits)
    s = sum(math.exp(v - m) for v in logits)
    return [v - m - math.log(s) for v in logits]


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def pass_at_k_enumerated(n, c, k):
    """Exact probability that a uniformly random k-subset of n items holds a success.

    Enumerates every subset as a bitmask; successes are items 0..c-1.
    """
    masks = np.arange(1 << n, dtype=np.int64)
    pop = np.zeros_like(masks)
    for b in range(n):
        pop += (masks >> b) & 1
    size_k = pop == k
    hit = (masks & ((1 << c) - 1)) != 0
    return Fraction(int((size_k & hit).sum()), int(size_k.sum()))


def pass_at_k_enumerated_all(n):
    """``{(c, k): Fraction}`` for every ``c, k <= n``, sharing one subset enumeration."""
    masks = np.arange(1 << n, dtype=np.int64)
    pop = np.zeros_like(masks)
    for b in range(n):
        pop += (masks >> b) & 1
    totals = np.bincount(pop, minlength=n + 1)
    out = {}
    for c in range(n + 1):
        hit = (masks & ((1 << c) - 1)) != 0
        hits = np.bincount(pop[hit], minlength=n + 1)
        for k in range(n + 1):
            out[c, k] = Fraction(int(hits[k]), int(totals[k]))
    return out


def pass_at_k_comb(n, c, k):
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def position_log_prob_ref(logits, seq):
    return sum(log_softmax_ref(list(logits[i]))[t] for i, t in enumerate(seq))


def markov_log_prob_ref(start, trans, seq):
    lp = log_softmax_ref(list(start))[seq[0]]
    for prev, cur in zip(seq[:-1], seq[1:]):
        lp += log_softmax_ref(list(trans[prev]))[cur]
    return lp


def all_sequences(length, a):
    return [list(s) for s in product(range(a), repeat=length)]


def kl_enumerated(logp_fn, logq_fn, length, a):
    total = 0.0
    for s in all_sequences(length, a):
        lp = logp_fn(s)
        total += math.exp(lp) * (lp - logq_fn(s))
    return total


def entropy_enumerated(logp_fn, length, a):
    return -sum(math.exp(logp_fn(s)) * logp_fn(s) for s in all_sequences(length, a))


def mutation_log_prob_ref(pos_logits, res_logits, state, wild_type, mask, pos, res, temp=1.0, pos_temp=1.0,
                          weight=0.5):
    """Residue term over the support excluding current and wild-type residue,
    plus ``weight`` times the position term over the masked positions."""
    allowed_pos = [i for i in range(len(mask)) if mask[i]]
    zp = [pos_logits[i] / pos_temp for i in allowed_pos]
    lp_pos = log_softmax_ref(zp)[allowed_pos.index(pos)]
    allowed_res = [r for r in range(len(res_logits[pos])) if r != state[pos] and r != wild_type[pos]]
    zr = [res_logits[pos][r] / temp for r in allowed_res]
    lp_res = log_softmax_ref(zr)[allowed_res.index(res)]
    return lp_res + weight * lp_pos


def gae_ref(rewards, values, bootstrap, gamma, lam):
    T = len(rewards)
    adv = [0.0] * T
    for t in range(T):
        # explicit weighted sum of TD errors
        total = 0.0
        for l in range(t, T):
            v_next = values[l + 1] if l + 1 < T else bootstrap
            delta = rewards[l] + gamma * v_next - values[l]
            total += (gamma * lam) ** (l - t) * delta
        adv[t] = total
    return adv, [a + v for a, v in zip(adv, values)]


def average_ranks(x):
    """1-based ranks with ties sharing the mean rank."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = (i + j) / 2 + 1
        for m in range(i, j + 1):
            ranks[order[m]] = r
        i = j + 1
    return ranks


def identity_ref(a, b):
    m = min(len(a), len(b))
    return sum(1 for i in range(m) if a[i] == b[i]) / max(len(a), len(b))
