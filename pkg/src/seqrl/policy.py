"""Linear-softmax policies with exact log-probabilities and gradients.

Three families are provided:

* :class:`PositionCategoricalPolicy` -- independent categorical per position.
* :class:`MarkovPolicy` -- left-to-right generation conditioned on the
  previous token.
* :class:`MutationPolicy` -- a (position, residue) action distribution for
  mutation episodes.

Every policy exposes a flat parameter vector (``params`` / ``set_params``)
so losses and optimizers can treat them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass
import json
import os
from pathlib import Path
import tempfile

import numpy as np

from .core import (
    CategoricalDist,
    RngStream,
    as_sequence,
    log_softmax,
    softmax_array,
    top_p_filter,
)
from .exceptions import InvalidAction, InvalidInput, ParseError

CHECKPOINT_FORMAT = "seqrl.policy"
CHECKPOINT_VERSION = 1
DEFAULT_POSITION_THRESHOLD = 0.5


@dataclass(frozen=True)
class LogProbGrad:
    log_prob: float
    grad: np.ndarray


def _finite_matrix(x, ndim, name):
    x = np.array(x, dtype=float)
    if x.ndim != ndim:
        raise InvalidInput(f"{name} must be {ndim}-D, got shape {x.shape}")
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise InvalidInput(f"{name} must be non-empty and finite")
    return x


def _filtered_rows(logits, temperature, top_p):
    """Row-wise temperature softmax followed by the nucleus filter."""
    if not np.isfinite(temperature) or temperature <= 0:
        raise InvalidInput(f"temperature must be positive, got {temperature!r}")
    if not (0 < top_p <= 1):
        raise InvalidInput(f"top_p must lie in (0, 1], got {top_p!r}")
    rows = softmax_array(logits, temperature)
    if top_p < 1:
        rows = np.stack([top_p_filter(CategoricalDist(r / r.sum()), top_p).probabilities for r in rows])
    return rows


def _draw_rows(cdf_rows, u):
    """Inverse-CDF draw, one uniform per row of ``cdf_rows``."""
    idx = (cdf_rows <= (u * cdf_rows[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def _categorical_kl(p_log, q_log):
    p = np.exp(p_log)
    return (p * (p_log - q_log)).sum(axis=-1)


def _kl_logit_grad(p_log, q_log):
    """Gradient of KL(p || q) with respect to the logits of p."""
    p = np.exp(p_log)
    kl = (p * (p_log - q_log)).sum(axis=-1, keepdims=True)
    return p * (p_log - q_log - kl)


class PositionCategoricalPolicy:
    """Independent softmax over the alphabet at each of ``L`` positions."""

    family = "position_categorical"

    def __init__(self, logits):
        self.logits = _finite_matrix(logits, 2, "logits")

    @classmethod
    def uniform(cls, length, alphabet_size):
        return cls(np.zeros((length, alphabet_size)))

    @classmethod
    def random(cls, length, alphabet_size, rng, scale=1.0):
        return cls(rng.normal(0.0, scale, size=(length, alphabet_size)))

    @property
    def length(self):
        return self.logits.shape[0]

    @property
    def alphabet_size(self):
        return self.logits.shape[1]

    @property
    def dims(self):
        return {"length": self.length, "alphabet_size": self.alphabet_size}

    @property
    def n_params(self):
        return self.logits.size

    @property
    def params(self):
        return self.logits.ravel().copy()

    def set_params(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise InvalidInput(f"expected {self.n_params} parameters, got shape {params.shape}")
        self.logits = params.reshape(self.logits.shape).copy()
        return self

    def copy(self):
        return type(self)(self.logits.copy())

    def _check_batch(self, seqs):
        seqs = np.asarray(seqs)
        if seqs.ndim == 1:
            seqs = seqs[None, :]
        if seqs.ndim != 2 or seqs.shape[1] != self.length:
            raise InvalidInput(f"sequence length must be {self.length}, got shape {seqs.shape}")
        if seqs.dtype.kind not in "iu" or seqs.min() < 0 or seqs.max() >= self.alphabet_size:
            raise InvalidInput("token index out of range")
        return seqs.astype(np.int64, copy=False)

    def log_prob_batch(self, seqs):
        seqs = self._check_batch(seqs)
        logp = log_softmax(self.logits)
        return logp[np.arange(self.length), seqs].sum(axis=1)

    def grad_log_prob_batch(self, seqs):
        seqs = self._check_batch(seqs)
        n = seqs.shape[0]
        probs = softmax_array(self.logits)
        grads = np.broadcast_to(-probs, (n,) + probs.shape).copy()
        grads[np.arange(n)[:, None], np.arange(self.length)[None, :], seqs] += 1.0
        return grads.reshape(n, -1)

    def sample(self, n, rng, temperature=1.0, top_p=1.0):
        rows = _filtered_rows(self.logits, temperature, top_p)
        cdf = np.cumsum(rows, axis=1)
        out = np.empty((n, self.length), dtype=np.int64)
        u = rng.random((n, self.length))
        for i in range(self.length):
            idx = np.searchsorted(cdf[i], u[:, i] * cdf[i, -1], side="right")
            out[:, i] = np.minimum(idx, self.alphabet_size - 1)
        return out

    def kl_divergence(self, reference):
        """Exact sequence-level KL(self || reference) and its gradient."""
        p_log = log_softmax(self.logits)
        q_log = log_softmax(reference.logits)
        kl = float(_categorical_kl(p_log, q_log).sum())
        return kl, _kl_logit_grad(p_log, q_log).ravel()

    def entropy(self):
        """Sequence entropy (sum of per-position entropies) and its gradient."""
        uniform = type(self).uniform(self.length, self.alphabet_size)
        kl, grad = self.kl_divergence(uniform)
        return self.length * np.log(self.alphabet_size) - kl, -grad

    def log_prob_table(self):
        """Log-probability of every sequence in A^L, in lexicographic order."""
        logp = log_softmax(self.logits)
        total = np.zeros(1)
        for i in range(self.length):
            total = (total[:, None] + logp[i][None, :]).ravel()
        return total

    def to_dict(self):
        return {"logits": self.logits.tolist()}

    @classmethod
    def from_dict(cls, dims, params):
        logits = np.array(params["logits"], dtype=float)
        if logits.shape != (dims["length"], dims["alphabet_size"]):
            raise ParseError(f"logits shape {logits.shape} does not match dims {dims}")
        return cls(logits)


class MarkovPolicy:
    """First-order autoregressive policy generating exactly ``length`` tokens."""

    family = "markov"

    def __init__(self, start_logits, transition_logits, length):
        self.start_logits = _finite_matrix(start_logits, 1, "start_logits")
        self.transition_logits = _finite_matrix(transition_logits, 2, "transition_logits")
        a = self.start_logits.size
        if self.transition_logits.shape != (a, a):
            raise InvalidInput(f"transition_logits must be {a}x{a}")
        if int(length) < 1:
            raise InvalidInput("length must be >= 1")
        self.length = int(length)

    @classmethod
    def uniform(cls, length, alphabet_size):
        return cls(np.zeros(alphabet_size), np.zeros((alphabet_size, alphabet_size)), length)

    @classmethod
    def random(cls, length, alphabet_size, rng, scale=1.0):
        return cls(
            rng.normal(0.0, scale, size=alphabet_size),
            rng.normal(0.0, scale, size=(alphabet_size, alphabet_size)),
            length,
        )

    @property
    def alphabet_size(self):
        return self.start_logits.size

    @property
    def dims(self):
        return {"length": self.length, "alphabet_size": self.alphabet_size}

    @property
    def n_params(self):
        return self.start_logits.size + self.transition_logits.size

    @property
    def params(self):
        return np.concatenate([self.start_logits, self.transition_logits.ravel()])

    def set_params(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise InvalidInput(f"expected {self.n_params} parameters, got shape {params.shape}")
        a = self.alphabet_size
        self.start_logits = params[:a].copy()
        self.transition_logits = params[a:].reshape(a, a).copy()
        return self

    def copy(self):
        return type(self)(self.start_logits.copy(), self.transition_logits.copy(), self.length)

    def _check_batch(self, seqs):
        if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
            rows = [seqs]
        else:
            rows = seqs if not (isinstance(seqs, np.ndarray) and seqs.ndim == 1) else [seqs]
        out = []
        for r in rows:
            r = np.asarray(r)
            if r.ndim == 2:
                out.extend(as_sequence(x, self.alphabet_size) for x in r)
            else:
                out.append(as_sequence(r, self.alphabet_size))
        return out

    def log_prob_batch(self, seqs):
        start = log_softmax(self.start_logits)
        trans = log_softmax(self.transition_logits)
        vals = []
        for s in self._check_batch(seqs):
            vals.append(start[s[0]] + trans[s[:-1], s[1:]].sum())
        return np.array(vals)

    def grad_log_prob_batch(self, seqs):
        a = self.alphabet_size
        p0 = softmax_array(self.start_logits)
        pt = softmax_array(self.transition_logits)
        seqs = self._check_batch(seqs)
        grads = np.zeros((len(seqs), self.n_params))
        for n, s in enumerate(seqs):
            g_start = -p0.copy()
            g_start[s[0]] += 1.0
            g_trans = np.zeros((a, a))
            prev, nxt = s[:-1], s[1:]
            np.add.at(g_trans, (prev, nxt), 1.0)
            counts = np.bincount(prev, minlength=a)
            g_trans -= counts[:, None] * pt
            grads[n, :a] = g_start
            grads[n, a:] = g_trans.ravel()
        return grads

    def sample(self, n, rng, temperature=1.0, top_p=1.0):
        start = _filtered_rows(self.start_logits[None, :], temperature, top_p)[0]
        trans = _filtered_rows(self.transition_logits, temperature, top_p)
        cdf_start = np.cumsum(start)
        cdf_trans = np.cumsum(trans, axis=1)
        out = np.empty((n, self.length), dtype=np.int64)
        u = rng.random((n, self.length))
        idx = np.searchsorted(cdf_start, u[:, 0] * cdf_start[-1], side="right")
        out[:, 0] = np.minimum(idx, self.alphabet_size - 1)
        for t in range(1, self.length):
            out[:, t] = _draw_rows(cdf_trans[out[:, t - 1]], u[:, t])
        return out

    def kl_divergence(self, reference):
        """Exact KL(self || reference) over length-``L`` sequences, with gradient.

        The sequence KL decomposes into the start-token KL plus per-step
        transition KLs weighted by the policy's marginal over the previous
        token; the gradient is obtained with a backward (adjoint) pass over
        the value-to-go of those per-row KLs.
        """
        a = self.alphabet_size
        ps_log = log_softmax(self.start_logits)
        qs_log = log_softmax(reference.start_logits)
        pt_log = log_softmax(self.transition_logits)
        qt_log = log_softmax(reference.transition_logits)
        p0, pt = np.exp(ps_log), np.exp(pt_log)
        kl_start = float(_categorical_kl(ps_log, qs_log))
        kl_rows = _categorical_kl(pt_log, qt_log)
        g_start = _kl_logit_grad(ps_log, qs_log)
        g_rows = _kl_logit_grad(pt_log, qt_log)
        steps = self.length - 1
        if steps == 0:
            return kl_start, np.concatenate([g_start, np.zeros(a * a)])
        # marginals m[t] over the token at position t, t = 0..steps-1
        m = np.empty((steps, a))
        m[0] = p0
        for t in range(1, steps):
            m[t] = m[t - 1] @ pt
        # v[t][x]: expected remaining KL when token t is x
        v = np.empty((steps, a))
        v[-1] = kl_rows
        for t in range(steps - 2, -1, -1):
            v[t] = kl_rows + pt @ v[t + 1]
        kl = kl_start + float(p0 @ v[0])
        g_start = g_start + p0 * (v[0] - p0 @ v[0])
        g_trans = m.sum(axis=0)[:, None] * g_rows
        for t in range(steps - 1):
            w = v[t + 1]
            g_trans += m[t][:, None] * pt * (w[None, :] - (pt @ w)[:, None])
        return kl, np.concatenate([g_start, g_trans.ravel()])

    def entropy(self):
        uniform = type(self).uniform(self.length, self.alphabet_size)
        kl, grad = self.kl_divergence(uniform)
        return self.length * np.log(self.alphabet_size) - kl, -grad

    def log_prob_table(self):
        """Log-probability of every length-``L`` sequence in lexicographic order."""
        start = log_softmax(self.start_logits)
        trans = log_softmax(self.transition_logits)
        a = self.alphabet_size
        total = start.copy()
        for _ in range(1, self.length):
            # last token of the flattened prefix index i is i % a
            total = (total[:, None] + trans[np.arange(total.size) % a]).ravel()
        return total

    def to_dict(self):
        return {"start_logits": self.start_logits.tolist(), "transition_logits": self.transition_logits.tolist()}

    @classmethod
    def from_dict(cls, dims, params):
        pol = cls(params["start_logits"], params["transition_logits"], dims["length"])
        if pol.alphabet_size != dims["alphabet_size"]:
            raise ParseError("start_logits size does not match alphabet_size")
        return pol


@dataclass
class MutationBatch:
    """Parallel arrays describing ``N`` scored mutation actions.

    ``temperatures`` and ``position_temps`` are the sampling temperatures
    in force when each action was drawn, so replayed log-probabilities match
    the recorded ones.
    """

    states: np.ndarray
    positions: np.ndarray
    residues: np.ndarray
    wild_types: np.ndarray
    masks: np.ndarray
    temperatures: np.ndarray
    position_temps: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.int64))
        n, length = self.states.shape
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(n)
        self.residues = np.asarray(self.residues, dtype=np.int64).reshape(n)
        self.wild_types = np.broadcast_to(np.asarray(self.wild_types, dtype=np.int64), (n, length))
        self.masks = np.broadcast_to(np.asarray(self.masks, dtype=bool), (n, length))
        self.temperatures = np.broadcast_to(np.asarray(self.temperatures, dtype=float), (n,))
        self.position_temps = np.broadcast_to(np.asarray(self.position_temps, dtype=float), (n,))

    def __len__(self):
        return self.states.shape[0]

    def subset(self, idx):
        return MutationBatch(
            self.states[idx], self.positions[idx], self.residues[idx], self.wild_types[idx],
            self.masks[idx], self.temperatures[idx], self.position_temps[idx],
        )

    @classmethod
    def concatenate(cls, batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in (
            "states", "positions", "residues", "wild_types", "masks", "temperatures", "position_temps")))


class MutationPolicy:
    """Factorized (position, residue) policy for mutation episodes.

    ``log pi(pos, res) = log pi_aa(res | pos) + position_weight * log pi_pos(pos)``
    where ``pi_pos`` is a softmax over masked positions and ``pi_aa`` a
    softmax over residues with the current and wild-type residue removed
    and the remainder renormalized.
    """

    family = "mutation"

    def __init__(self, position_logits, residue_logits, position_weight=0.5):
        self.position_logits = _finite_matrix(position_logits, 1, "position_logits")
        self.residue_logits = _finite_matrix(residue_logits, 2, "residue_logits")
        if self.residue_logits.shape[0] != self.position_logits.size:
            raise InvalidInput("residue_logits must have one row per position")
        if self.residue_logits.shape[1] < 3:
            # two residues may be excluded at a site, so three is the minimum
            raise InvalidInput("mutation policies need an alphabet of at least 3 residues")
        if not np.isfinite(position_weight) or position_weight < 0:
            raise InvalidInput("position_weight must be non-negative")
        self.position_weight = float(position_weight)

    @classmethod
    def uniform(cls, length, alphabet_size, position_weight=0.5):
        return cls(np.zeros(length), np.zeros((length, alphabet_size)), position_weight)

    @classmethod
    def random(cls, length, alphabet_size, rng, scale=1.0, position_weight=0.5):
        return cls(
            rng.normal(0.0, scale, size=length),
            rng.normal(0.0, scale, size=(length, alphabet_size)),
            position_weight,
        )

    @property
    def length(self):
        return self.position_logits.size

    @property
    def alphabet_size(self):
        return self.residue_logits.shape[1]

    @property
    def dims(self):
        return {"length": self.length, "alphabet_size": self.alphabet_size}

    @property
    def n_params(self):
        return self.position_logits.size + self.residue_logits.size

    @property
    def params(self):
        return np.concatenate([self.position_logits, self.residue_logits.ravel()])

    def set_params(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise InvalidInput(f"expected {self.n_params} parameters, got shape {params.shape}")
        self.position_logits = params[: self.length].copy()
        self.residue_logits = params[self.length:].reshape(self.residue_logits.shape).copy()
        return self

    def copy(self):
        return type(self)(self.position_logits.copy(), self.residue_logits.copy(), self.position_weight)

    # -- distributions -------------------------------------------------

    def position_log_probs(self, mask, position_temp=1.0):
        """Log-softmax over positions restricted to ``mask`` (``-inf`` elsewhere)."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise InvalidInput("mask must select at least one position")
        z = np.where(mask, self.position_logits / np.asarray(position_temp)[..., None], -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))

    def residue_log_probs(self, positions, states, wild_types, temperature=1.0):
        """Log-softmax over residues at ``positions`` with exclusions applied."""
        positions = np.atleast_1d(np.asarray(positions, dtype=np.int64))
        states = np.atleast_2d(states)
        wild_types = np.atleast_2d(wild_types)
        n = positions.size
        rows = np.arange(n)
        z = self.residue_logits[positions] / np.atleast_1d(np.asarray(temperature, dtype=float))[:, None]
        z = z.copy()
        z[rows, states[rows, positions]] = -np.inf
        z[rows, wild_types[rows, positions]] = -np.inf
        zmax = z.max(axis=-1, keepdims=True)
        return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))

    def _validate(self, batch):
        n = len(batch)
        if batch.states.shape[1] != self.length:
            raise InvalidInput(f"state length must be {self.length}")
        rows = np.arange(n)
        if np.any(batch.positions < 0) or np.any(batch.positions >= self.length):
            raise InvalidAction("mutation position out of range")
        if np.any(batch.residues < 0) or np.any(batch.residues >= self.alphabet_size):
            raise InvalidAction("mutation residue out of range")
        if not np.all(batch.masks[rows, batch.positions]):
            raise InvalidAction("mutation at a masked-out position")
        if np.any(batch.residues == batch.states[rows, batch.positions]):
            raise InvalidAction("mutation to the current residue")
        if np.any(batch.residues == batch.wild_types[rows, batch.positions]):
            raise InvalidAction("mutation to the wild-type residue")

    def log_prob_batch(self, batch):
        self._validate(batch)
        rows = np.arange(len(batch))
        pos_lp = self.position_log_probs(batch.masks, batch.position_temps)[rows, batch.positions]
        aa_lp = self.residue_log_probs(batch.positions, batch.states, batch.wild_types, batch.temperatures)
        return aa_lp[rows, batch.residues] + self.position_weight * pos_lp

    def grad_log_prob_batch(self, batch):
        self._validate(batch)
        n, length, a = len(batch), self.length, self.alphabet_size
        rows = np.arange(n)
        grads = np.zeros((n, self.n_params))
        p_pos = np.exp(self.position_log_probs(batch.masks, batch.position_temps))
        g_pos = -p_pos
        g_pos[rows, batch.positions] += 1.0
        grads[:, :length] = self.position_weight * g_pos / batch.position_temps[:, None]
        q = np.exp(self.residue_log_probs(batch.positions, batch.states, batch.wild_types, batch.temperatures))
        g_aa = -q
        g_aa[rows, batch.residues] += 1.0
        g_aa /= batch.temperatures[:, None]
        cols = length + batch.positions[:, None] * a + np.arange(a)[None, :]
        grads[rows[:, None], cols] = g_aa
        return grads

    def residue_kl(self, reference, batch):
        """Mean KL(self || reference) of the residue distributions at the
        mutated sites of ``batch`` (temperature 1), with gradient."""
        n, a = len(batch), self.alphabet_size
        p_log = self.residue_log_probs(batch.positions, batch.states, batch.wild_types)
        q_log = reference.residue_log_probs(batch.positions, batch.states, batch.wild_types)
        p = np.exp(p_log)
        # excluded residues carry p = 0 and contribute nothing
        finite = p > 0
        diff = np.zeros_like(p_log)
        diff[finite] = p_log[finite] - q_log[finite]
        kl_each = (p * diff).sum(axis=1)
        g_rows = p * (diff - kl_each[:, None])
        grad = np.zeros(self.n_params)
        idx = self.length + batch.positions[:, None] * a + np.arange(a)[None, :]
        np.add.at(grad, idx, g_rows / n)
        return float(kl_each.mean()), grad

    def position_entropy(self, masks):
        """Mean entropy of the masked position distribution (temperature 1)."""
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        lp = self.position_log_probs(masks, np.ones(masks.shape[0]))
        p = np.exp(lp)
        plogp = np.zeros_like(p)
        plogp[p > 0] = p[p > 0] * lp[p > 0]
        h = -plogp.sum(axis=1)
        g = -(plogp + p * h[:, None])
        grad = np.zeros(self.n_params)
        grad[: self.length] = g.mean(axis=0)
        return float(h.mean()), grad

    def sample_action(self, state, wild_type, mask, rng, temperature=1.0, position_temp=1.0):
        """Draw one (position, residue) action; returns ``(position, residue, log_prob)``."""
        p_pos = np.exp(self.position_log_probs(mask, position_temp))
        pos = int(rng.categorical(p_pos))
        lp_aa = self.residue_log_probs([pos], state[None, :], wild_type[None, :], temperature)[0]
        res = int(rng.categorical(np.exp(lp_aa)))
        log_prob = lp_aa[res] + self.position_weight * np.log(p_pos[pos])
        return pos, res, float(log_prob)

    def to_dict(self):
        return {
            "position_logits": self.position_logits.tolist(),
            "residue_logits": self.residue_logits.tolist(),
            "position_weight": self.position_weight,
        }

    @classmethod
    def from_dict(cls, dims, params):
        pol = cls(params["position_logits"], params["residue_logits"], params.get("position_weight", 0.5))
        if pol.dims != {"length": dims["length"], "alphabet_size": dims["alphabet_size"]}:
            raise ParseError(f"parameter shapes do not match dims {dims}")
        return pol


# -- module-level operations ------------------------------------------


def sample_sequence(policy, temperature=1.0, top_p=1.0, rng=None):
    """Draw a single sequence with temperature scaling and nucleus filtering."""
    rng = rng if rng is not None else RngStream()
    return as_sequence(policy.sample(1, rng, temperature, top_p)[0], policy.alphabet_size)


def log_prob(policy, seq):
    """Exact training-time log-likelihood (temperature 1, no nucleus filter)."""
    seq = as_sequence(seq, policy.alphabet_size)
    if isinstance(policy, PositionCategoricalPolicy) and seq.size != policy.length:
        raise InvalidInput(f"sequence length {seq.size} != policy length {policy.length}")
    return float(policy.log_prob_batch(seq[None, :])[0])


def grad_log_prob(policy, seq):
    seq = as_sequence(seq, policy.alphabet_size)
    if isinstance(policy, PositionCategoricalPolicy) and seq.size != policy.length:
        raise InvalidInput(f"sequence length {seq.size} != policy length {policy.length}")
    lp = float(policy.log_prob_batch(seq[None, :])[0])
    return LogProbGrad(lp, policy.grad_log_prob_batch(seq[None, :])[0])


def _single_batch(policy, state, action, mask, temperature, position_temp, wild_type):
    state = as_sequence(state, policy.alphabet_size)
    wild_type = state if wild_type is None else as_sequence(wild_type, policy.alphabet_size)
    mask = np.asarray(mask, dtype=bool)
    if state.size != policy.length or wild_type.size != policy.length or mask.shape != (policy.length,):
        raise InvalidInput("state, wild type and mask must match the policy length")
    pos, res = action
    return MutationBatch(state[None, :], [pos], [res], wild_type[None, :], mask[None, :],
                         [temperature], [position_temp])


def mutation_log_prob(policy, state, action, mask, temperature=1.0, position_temp=1.0, wild_type=None):
    """``log pi_aa + position_weight * log pi_pos`` for one action.

    The residue term excludes ``state[position]`` (and ``wild_type[position]``
    when a wild type is given) and renormalizes; the position term is
    renormalized over ``mask``.
    """
    batch = _single_batch(policy, state, action, mask, temperature, position_temp, wild_type)
    return float(policy.log_prob_batch(batch)[0])


def grad_mutation_log_prob(policy, state, action, mask, temperature=1.0, position_temp=1.0, wild_type=None):
    batch = _single_batch(policy, state, action, mask, temperature, position_temp, wild_type)
    return LogProbGrad(float(policy.log_prob_batch(batch)[0]), policy.grad_log_prob_batch(batch)[0])


def position_propensities(policy, mask, position_temp=1.0):
    """Independent per-site propensities ``sigmoid(logit / position_temp)``, zero off-mask."""
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 1.0 / (1.0 + np.exp(-policy.position_logits / position_temp)), 0.0)


def mutate_step(policy, state, wild_type, mask, max_sites=4, temperature=1.0, position_temp=1.0,
                stochastic=True, rng=None, threshold=DEFAULT_POSITION_THRESHOLD):
    """Policy-guided multi-site mutation.

    Stochastic mode draws up to ``max_sites`` distinct positions among masked
    sites whose propensity exceeds ``threshold`` (probability proportional
    to propensity, without replacement), falling back to the single most
    propensive masked site when none qualifies; residues are sampled with
    the wild-type residue zeroed and the rest renormalized.  Deterministic
    mode takes the top ``max_sites`` masked sites and the argmax residue.

    Returns ``(mutant, actions, log_prob)`` where ``log_prob`` sums the
    per-site :func:`mutation_log_prob` terms, removing each chosen position
    from the mask before scoring the next.
    """
    state = as_sequence(state, policy.alphabet_size)
    wild_type = as_sequence(wild_type, policy.alphabet_size)
    mask = np.asarray(mask, dtype=bool)
    if state.size != policy.length or wild_type.size != policy.length or mask.shape != (policy.length,):
        raise InvalidInput("state, wild type and mask must match the policy length")
    if max_sites < 1:
        raise InvalidInput("max_sites must be >= 1")
    if not mask.any():
        raise InvalidInput("mask must select at least one position")
    if stochastic and rng is None:
        raise InvalidInput("stochastic mode needs an RngStream")

    prop = position_propensities(policy, mask, position_temp)
    masked_idx = np.flatnonzero(mask)
    # stable sort keeps ties in ascending index order
    ranked = masked_idx[np.argsort(-prop[masked_idx], kind="stable")]
    if stochastic:
        eligible = masked_idx[prop[masked_idx] > threshold]
        if eligible.size == 0:
            chosen = ranked[:1]
        else:
            k = min(max_sites, eligible.size)
            w = prop[eligible] / prop[eligible].sum()
            chosen = rng.generator.choice(eligible, size=k, replace=False, p=w)
    else:
        chosen = ranked[:max_sites]

    mutant = np.array(state)
    actions = []
    total = 0.0
    remaining = mask.copy()
    for pos in (int(p) for p in chosen):
        lp_aa = policy.residue_log_probs([pos], state[None, :], wild_type[None, :], temperature)[0]
        if stochastic:
            res = int(rng.categorical(np.exp(lp_aa)))
        else:
            res = int(np.argmax(lp_aa))
        total += mutation_log_prob(policy, state, (pos, res), remaining, temperature, position_temp, wild_type)
        remaining[pos] = False
        mutant[pos] = res
        actions.append((pos, res))
    return as_sequence(mutant), actions, total


# -- checkpoints --------------------------------------------------------

_FAMILIES = {cls.family: cls for cls in (PositionCategoricalPolicy, MarkovPolicy, MutationPolicy)}


def policy_to_document(policy):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "family": policy.family,
        "dims": policy.dims,
        "params": policy.to_dict(),
    }


def policy_from_document(doc):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a policy checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        cls = _FAMILIES[doc["family"]]
    except KeyError:
        raise ParseError(f"unknown policy family {doc.get('family')!r}") from None
    return cls.from_dict(doc["dims"], doc["params"])


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_policy(policy, path):
    # json writes floats with repr(), which round-trips float64 exactly
    atomic_write_text(path, json.dumps(policy_to_document(policy), indent=1) + "\n")


def load_policy(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed checkpoint: {exc.msg}", exc.lineno) from None
    return policy_from_document(doc)
