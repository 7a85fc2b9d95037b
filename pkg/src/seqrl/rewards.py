"""Reward oracles: lookup tables, NK landscapes and reward transforms.

An oracle is any object with ``__call__(seq) -> float`` and
``batch(seqs) -> ndarray``.  Oracles are pure; binary success is decided
separately by a :class:`SuccessThreshold`.
"""
from __future__ import annotations

import csv
import io
from itertools import product
import math
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .core import Alphabet, RngStream, as_sequence, hash_uniforms
from .exceptions import DuplicateVariant, InvalidInput, ParseError

DEFAULT_UNLABELED = -1.0
INVALID_PENALTY = -100.0
PHOQ_WILD_TYPE = "AVST"


class RewardOracle:
    """Base class providing a looped ``batch`` on top of ``__call__``."""

    def __call__(self, seq):
        raise NotImplementedError

    def batch(self, seqs):
        return np.array([self(s) for s in np.atleast_2d(seqs)], dtype=float)


class SuccessThreshold:
    """Success predicate ``reward >= threshold``."""

    def __init__(self, threshold):
        self.threshold = float(threshold)

    def __call__(self, value):
        return np.asarray(value) >= self.threshold

    def __repr__(self):
        return f"SuccessThreshold({self.threshold!r})"


def _encode_codes(tuples, base):
    tuples = np.asarray(tuples, dtype=np.int64)
    weights = base ** np.arange(tuples.shape[-1] - 1, -1, -1, dtype=np.int64)
    return tuples @ weights


class TableLandscape(RewardOracle):
    """Fitness lookup over the residues at ``site_positions``.

    Sequences that differ from ``wild_type`` anywhere outside the sites get
    ``invalid_penalty``; site tuples absent from the table get
    ``default_unlabeled``.
    """

    def __init__(self, site_positions, wild_type, table, alphabet_size=20,
                 default_unlabeled=DEFAULT_UNLABELED, invalid_penalty=INVALID_PENALTY):
        self.site_positions = np.asarray(site_positions, dtype=np.int64)
        self.wild_type = as_sequence(wild_type, alphabet_size)
        self.alphabet_size = int(alphabet_size)
        self.default_unlabeled = float(default_unlabeled)
        self.invalid_penalty = float(invalid_penalty)
        m = self.site_positions.size
        if m == 0 or len(set(self.site_positions.tolist())) != m:
            raise InvalidInput("site_positions must be a non-empty list of distinct positions")
        if self.site_positions.min() < 0 or self.site_positions.max() >= self.wild_type.size:
            raise InvalidInput("site position outside the wild-type sequence")
        self._off_site = np.ones(self.wild_type.size, dtype=bool)
        self._off_site[self.site_positions] = False

        if isinstance(table, tuple) and len(table) == 2:
            keys, values = (np.asarray(x) for x in table)
        else:
            items = list(table.items())
            keys = np.array([k for k, _ in items], dtype=np.int64).reshape(len(items), m)
            values = np.array([v for _, v in items], dtype=float)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, m)
        if keys.size and (keys.min() < 0 or keys.max() >= self.alphabet_size):
            raise InvalidInput("table key residue out of range")
        codes = _encode_codes(keys, self.alphabet_size)
        order = np.argsort(codes, kind="stable")
        self._codes = codes[order]
        self._values = np.asarray(values, dtype=float)[order]
        if self._codes.size > 1 and np.any(self._codes[1:] == self._codes[:-1]):
            raise DuplicateVariant("duplicate site tuple in table")

    def __len__(self):
        return self._codes.size

    @property
    def n_sites(self):
        return self.site_positions.size

    @property
    def table(self):
        """Dictionary view ``{site tuple: fitness}`` (built on demand)."""
        keys = self.keys()
        return {tuple(int(x) for x in k): float(v) for k, v in zip(keys, self._values)}

    def keys(self):
        """Site tuples present in the table, as an ``(N, n_sites)`` array."""
        m, a = self.n_sites, self.alphabet_size
        digits = (self._codes[:, None] // (a ** np.arange(m - 1, -1, -1, dtype=np.int64))) % a
        return digits

    def values(self):
        return self._values.copy()

    def lookup_sites(self, site_tuples):
        """Vectorized lookup of site tuples; absent tuples map to ``default_unlabeled``."""
        site_tuples = np.atleast_2d(np.asarray(site_tuples, dtype=np.int64))
        codes = _encode_codes(site_tuples, self.alphabet_size)
        idx = np.searchsorted(self._codes, codes)
        idx_c = np.minimum(idx, max(self._codes.size - 1, 0))
        found = (idx < self._codes.size) & (self._codes[idx_c] == codes) if self._codes.size else np.zeros(codes.shape, bool)
        return np.where(found, self._values[idx_c] if self._codes.size else 0.0, self.default_unlabeled)

    def batch(self, seqs):
        seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
        if seqs.shape[1] != self.wild_type.size:
            raise InvalidInput(f"sequence length must be {self.wild_type.size}, got {seqs.shape[1]}")
        vals = self.lookup_sites(seqs[:, self.site_positions])
        invalid = np.any(seqs[:, self._off_site] != self.wild_type[self._off_site], axis=1)
        return np.where(invalid, self.invalid_penalty, vals)

    def __call__(self, seq):
        seq = as_sequence(seq, self.alphabet_size)
        return float(self.batch(seq[None, :])[0])

    def sequences_for(self, site_tuples):
        """Embed site tuples into copies of the wild type."""
        site_tuples = np.atleast_2d(np.asarray(site_tuples, dtype=np.int64))
        out = np.tile(self.wild_type, (site_tuples.shape[0], 1))
        out[:, self.site_positions] = site_tuples
        return out

    def top_fraction_threshold(self, fraction):
        """Smallest fitness among the top ``ceil(fraction * N)`` table entries."""
        if not (0 < fraction <= 1) or len(self) == 0:
            raise InvalidInput("fraction must lie in (0, 1] and the table must be non-empty")
        k = max(1, math.ceil(fraction * len(self) - 1e-9))
        return float(np.sort(self._values)[::-1][k - 1])


def table_fitness(land, seq):
    return land(seq)


class NKLandscape(RewardOracle):
    """Kauffman NK landscape over an alphabet of size ``alphabet_size``.

    Site ``i`` interacts with ``k`` other sites drawn without replacement;
    its contribution is a uniform [0, 1) value indexed by the residues at
    ``(i, neighbors...)``.  Fitness is the mean contribution.
    """

    def __init__(self, n, k, alphabet_size=20, seed=0):
        if n < 1 or k < 0 or k > n - 1:
            raise InvalidInput(f"need n >= 1 and 0 <= k <= n-1, got n={n}, k={k}")
        if (k + 1) * math.log(alphabet_size) > math.log(5e7):
            raise InvalidInput("contribution table too large; lower k or alphabet_size")
        self.n, self.k, self.alphabet_size, self.seed = int(n), int(k), int(alphabet_size), int(seed)
        rng = RngStream(seed, stream_id=0x4E4B)
        self.neighbor_table = np.array(
            [rng.generator.choice(np.delete(np.arange(n), i), size=k, replace=False) for i in range(n)],
            dtype=np.int64,
        ).reshape(n, k)
        self.contribution_table = rng.random((n, alphabet_size ** (k + 1)))
        self._idx = np.concatenate([np.arange(n)[:, None], self.neighbor_table], axis=1)

    def contributions(self, seqs):
        seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
        if seqs.shape[1] != self.n:
            raise InvalidInput(f"sequence length must be {self.n}, got {seqs.shape[1]}")
        if seqs.min() < 0 or seqs.max() >= self.alphabet_size:
            raise InvalidInput("token index out of range")
        codes = _encode_codes(seqs[:, self._idx], self.alphabet_size)
        return self.contribution_table[np.arange(self.n), codes]

    def batch(self, seqs):
        return self.contributions(seqs).mean(axis=1)

    def __call__(self, seq):
        return float(self.batch(as_sequence(seq, self.alphabet_size)[None, :])[0])

    def to_table(self):
        """Enumerate the complete landscape as a :class:`TableLandscape`."""
        if self.alphabet_size ** self.n > 5_000_000:
            raise InvalidInput("landscape too large to enumerate")
        keys = np.array(list(product(range(self.alphabet_size), repeat=self.n)), dtype=np.int64)
        return TableLandscape(np.arange(self.n), np.zeros(self.n, dtype=np.int64),
                              (keys, self.batch(keys)), self.alphabet_size)


def nk_fitness(land, seq):
    return land(seq)


class LogisticScorer(RewardOracle):
    """Per-position linear score squashed to [0, 1]; stands in for a binary classifier."""

    def __init__(self, weights, bias=0.0):
        self.weights = np.asarray(weights, dtype=float)
        self.bias = float(bias)

    @classmethod
    def random(cls, length, alphabet_size, seed=0, scale=1.0, bias=0.0):
        return cls(RngStream(seed, 0x5C).normal(0.0, scale, (length, alphabet_size)), bias)

    def batch(self, seqs):
        seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
        z = self.weights[np.arange(seqs.shape[1]), seqs].sum(axis=1) + self.bias
        return 1.0 / (1.0 + np.exp(-z))

    def __call__(self, seq):
        return float(self.batch(np.asarray(seq)[None, :])[0])


class ThresholdClassifierReward(RewardOracle):
    """Maps a classifier score f in [0, 1] to ``2 * (f - lam)``."""

    def __init__(self, scorer, lam=0.4):
        self.scorer = scorer
        self.lam = float(lam)

    def transform(self, f):
        return 2.0 * (np.asarray(f, dtype=float) - self.lam)

    def __call__(self, seq):
        return float(self.transform(self.scorer(seq)))

    def batch(self, seqs):
        return self.transform(self.scorer.batch(seqs))


def threshold_reward(r, seq):
    return r(seq)


class NoisyOracle(RewardOracle):
    """Degraded copy of ``base`` modelling an inaccurate reward model.

    For each sequence, a keyed hash of ``(seed, stream, sequence)`` decides
    whether the query is corrupted (probability ``corruption_rate``) and
    supplies Gaussian noise of scale ``noise_sd``.  A corrupted value is
    reflected about ``threshold`` (``2 * threshold - v``), which flips the
    success predicate ``v >= threshold`` while keeping the magnitude of
    the margin.  Results do not depend on query order.
    """

    def __init__(self, base, noise_sd=0.0, corruption_rate=0.0, rng=0, threshold=None):
        if noise_sd < 0:
            raise InvalidInput("noise_sd must be non-negative")
        if not (0 <= corruption_rate <= 1):
            raise InvalidInput("corruption_rate must lie in [0, 1]")
        if corruption_rate > 0 and threshold is None:
            raise InvalidInput("corruption needs a success threshold to flip")
        self.base = base
        self.noise_sd = float(noise_sd)
        self.corruption_rate = float(corruption_rate)
        self.threshold = None if threshold is None else float(threshold)
        if isinstance(rng, RngStream):
            self.seed, self.stream_id = rng.seed, rng.stream_id
        else:
            self.seed, self.stream_id = int(rng), 0

    def _draws(self, seq):
        return hash_uniforms(self.seed, seq, 2, salt=self.stream_id.to_bytes(8, "little"))

    def corrupted(self, seq):
        if self.corruption_rate == 0:
            return False
        return bool(self._draws(seq)[0] < self.corruption_rate)

    def _apply(self, seq, v):
        if self.corruption_rate == 0 and self.noise_sd == 0:
            return v
        u_corrupt, u_noise = self._draws(seq)
        if u_corrupt < self.corruption_rate:
            v = 2.0 * self.threshold - v
        if self.noise_sd > 0:
            v = v + self.noise_sd * float(ndtri(min(max(u_noise, 1e-300), 1 - 1e-16)))
        return float(v)

    def __call__(self, seq):
        return self._apply(seq, self.base(seq))

    def batch(self, seqs):
        seqs = np.atleast_2d(seqs)
        base = self.base.batch(seqs)
        if self.corruption_rate == 0 and self.noise_sd == 0:
            return base
        return np.array([self._apply(s, v) for s, v in zip(seqs, base)])


# -- CSV ingestion -------------------------------------------------------


def _parse_rows(lines, n_sites, alphabet):
    keys, values, seen = [], [], {}
    first_data = True
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = next(csv.reader([line]))
        if len(fields) != 2:
            raise ParseError(f"expected 'variant,fitness', got {len(fields)} fields", lineno)
        variant, fitness = fields[0].strip(), fields[1].strip()
        try:
            value = float(fitness)
        except ValueError:
            if first_data:
                first_data = False  # header row
                continue
            raise ParseError(f"fitness {fitness!r} is not a number", lineno) from None
        first_data = False
        if not math.isfinite(value):
            raise ParseError(f"fitness {fitness!r} is not finite", lineno)
        if len(variant) != n_sites:
            raise ParseError(f"variant {variant!r} has length {len(variant)}, expected {n_sites}", lineno)
        try:
            key = tuple(alphabet.index(c) for c in variant)
        except InvalidInput:
            raise ParseError(f"variant {variant!r} contains symbols outside the alphabet", lineno) from None
        if key in seen:
            raise DuplicateVariant(f"variant {variant!r} already defined on line {seen[key]}", lineno)
        seen[key] = lineno
        keys.append(key)
        values.append(value)
    return keys, values


def load_landscape_csv(path, site_positions, wild_type, alphabet=None,
                       default_unlabeled=DEFAULT_UNLABELED, invalid_penalty=INVALID_PENALTY):
    """Read a ``variant,fitness`` CSV into a :class:`TableLandscape`.

    ``wild_type`` may be a string over ``alphabet`` or a token array.  The
    returned landscape carries the number of parsed rows as ``row_count``.
    """
    alphabet = alphabet or Alphabet()
    if isinstance(wild_type, str):
        wild_type = alphabet.encode(wild_type)
    n_sites = len(site_positions)
    with open(path, encoding="utf-8") as fh:
        keys, values = _parse_rows(fh, n_sites, alphabet)
    keys = np.array(keys, dtype=np.int64).reshape(len(keys), n_sites)
    land = TableLandscape(site_positions, wild_type, (keys, np.array(values, dtype=float)),
                          alphabet.size, default_unlabeled, invalid_penalty)
    land.row_count = len(values)
    return land


def landscape_csv_text(land, alphabet=None):
    alphabet = alphabet or Alphabet()
    buf = io.StringIO()
    buf.write("variant,fitness\n")
    for key, value in zip(land.keys(), land.values()):
        buf.write(f"{alphabet.decode(key)},{float(value)!r}\n")
    return buf.getvalue()


def write_landscape_csv(land, path, alphabet=None):
    from .policy import atomic_write_text

    atomic_write_text(path, landscape_csv_text(land, alphabet))
    return Path(path)


# -- synthetic landscapes -------------------------------------------------


def make_phoq_like(seed=0, n_sites=4, alphabet=None, high_fraction=0.01, labeled_fraction=1.0,
                   zero_fraction=0.3, epistasis=0.5, wild_type=PHOQ_WILD_TYPE):
    """Synthetic PhoQ-shaped table over ``n_sites`` fully combinatorial sites.

    Scores are additive site effects plus pairwise epistasis; fitness is a
    monotone long-tailed map of the score rank: the lowest ``zero_fraction``
    are exactly 0, the rest span 0.01 to 100 on a log scale.  The attribute
    ``success_threshold`` marks the top ``high_fraction`` of labeled
    variants.  With ``labeled_fraction < 1`` a random subset of variants is
    left out of the table (and so scores ``default_unlabeled``).
    """
    alphabet = alphabet or Alphabet()
    a = alphabet.size
    if not (0 < high_fraction < 1) or not (0 < labeled_fraction <= 1) or not (0 <= zero_fraction < 1):
        raise InvalidInput("fractions out of range")
    if a ** n_sites > 5_000_000:
        raise InvalidInput("landscape too large to enumerate")
    wt = alphabet.encode(wild_type) if isinstance(wild_type, str) else as_sequence(wild_type, a)
    if wt.size != n_sites:
        raise InvalidInput("wild type length must equal n_sites")
    rng = RngStream(seed, stream_id=0x9409)
    effects = rng.normal(0.0, 1.0, (n_sites, a))
    keys = np.array(list(product(range(a), repeat=n_sites)), dtype=np.int64)
    score = effects[np.arange(n_sites), keys].sum(axis=1)
    for i in range(n_sites):
        for j in range(i + 1, n_sites):
            coupling = rng.normal(0.0, epistasis, (a, a))
            score += coupling[keys[:, i], keys[:, j]]
    ranks = np.empty(score.size)
    ranks[np.argsort(score, kind="stable")] = np.arange(score.size)
    u = (ranks + 0.5) / score.size
    v = np.clip((u - zero_fraction) / (1 - zero_fraction), 0.0, 1.0)
    fitness = np.where(u < zero_fraction, 0.0, np.round(10.0 ** (4.0 * v - 2.0), 6))
    if labeled_fraction < 1:
        keep = rng.random(keys.shape[0]) < labeled_fraction
        keys, fitness = keys[keep], fitness[keep]
    land = TableLandscape(np.arange(n_sites), wt, (keys, fitness), a)
    land.success_threshold = land.top_fraction_threshold(high_fraction)
    return land
