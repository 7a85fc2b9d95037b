"""Domain types, seeded randomness and categorical-distribution utilities.

Sequences are plain 1-D ``int64`` numpy arrays of token indices; use
:func:`as_sequence` to validate one.  Every stochastic draw goes through an
:class:`RngStream`, which wraps a counter-based Philox generator keyed by
``(seed, stream_id)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib

import numpy as np

from .exceptions import InvalidInput

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"

_U64 = (1 << 64) - 1


class Alphabet:
    """Ordered set of residue symbols; token ``i`` is ``symbols[i]``."""

    def __init__(self, symbols=AMINO_ACIDS):
        symbols = tuple(symbols)
        if not symbols:
            raise InvalidInput("alphabet must contain at least one symbol")
        if len(set(symbols)) != len(symbols):
            raise InvalidInput(f"alphabet symbols are not unique: {''.join(symbols)}")
        if any(len(s) != 1 for s in symbols):
            raise InvalidInput("alphabet symbols must be single characters")
        self.symbols = symbols
        self._index = {s: i for i, s in enumerate(symbols)}

    @property
    def size(self):
        return len(self.symbols)

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Alphabet) and other.symbols == self.symbols

    def __hash__(self):
        return hash(self.symbols)

    def __repr__(self):
        return f"Alphabet({''.join(self.symbols)!r})"

    def index(self, symbol):
        try:
            return self._index[symbol]
        except KeyError:
            raise InvalidInput(f"symbol {symbol!r} not in alphabet") from None

    def symbol(self, i):
        return self.symbols[i]

    def encode(self, text):
        """Map a string over the alphabet to a token array."""
        return as_sequence([self.index(c) for c in text], self.size)

    def decode(self, tokens):
        return "".join(self.symbols[int(t)] for t in tokens)


def as_sequence(tokens, alphabet_size=None):
    """Validate ``tokens`` and return them as a read-only int64 array.

    Raises :class:`InvalidInput` for empty input, non-integer entries or
    indices outside ``[0, alphabet_size)``.
    """
    arr = np.asarray(tokens)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInput(f"a sequence must be a non-empty 1-D vector, got shape {arr.shape}")
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and np.all(np.isfinite(arr)) and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise InvalidInput("sequence tokens must be integers")
    arr = arr.astype(np.int64, copy=True)
    if arr.min() < 0 or (alphabet_size is not None and arr.max() >= alphabet_size):
        raise InvalidInput(f"token index out of range for alphabet of size {alphabet_size}")
    arr.flags.writeable = False
    return arr


class RngStream:
    """Reproducible, splittable random stream.

    Identical ``(seed, stream_id)`` pairs replay identical draws; distinct
    ``stream_id`` values key independent Philox counters.  A stream is meant
    to be owned by a single worker.
    """

    def __init__(self, seed=0, stream_id=0):
        self.seed = int(seed) & _U64
        self.stream_id = int(stream_id) & _U64
        key = self.seed | (self.stream_id << 64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, index):
        """Independent child stream derived from this stream's identity."""
        mixed = np.random.SeedSequence([self.seed, self.stream_id, int(index) & _U64])
        return RngStream(int(mixed.generate_state(1, np.uint64)[0]), index)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def categorical(self, probabilities, size=None):
        """Draw indices from a probability vector by inverse-CDF lookup."""
        p = np.asarray(probabilities, dtype=float)
        cdf = np.cumsum(p)
        u = self.generator.random(size) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        # guards against u landing on the final edge through rounding
        return np.minimum(idx, len(p) - 1)


def hash_uniforms(seed, tokens, n=2, salt=b""):
    """Deterministic uniforms in [0, 1) derived from ``(seed, tokens)``.

    Used by oracles whose per-query randomness must not depend on call order.
    """
    h = hashlib.blake2b(digest_size=8 * n, key=int(seed & _U64).to_bytes(8, "little"), salt=salt[:16])
    h.update(np.ascontiguousarray(tokens, dtype=np.int64).tobytes())
    words = np.frombuffer(h.digest(), dtype="<u8")
    return (words >> np.uint64(11)).astype(float) / float(1 << 53)


@dataclass(frozen=True)
class CategoricalDist:
    probabilities: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise InvalidInput("probabilities must be a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvalidInput("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise InvalidInput(f"probabilities sum to {p.sum()!r}, expected 1")
        p.flags.writeable = False
        object.__setattr__(self, "probabilities", p)

    @property
    def support_size(self):
        return self.probabilities.size

    def __repr__(self):
        return f"CategoricalDist({np.array2string(self.probabilities, precision=4)})"


def _check_logits(logits):
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise InvalidInput("logits must be finite")
    return logits


def _check_temperature(temperature):
    if not np.isfinite(temperature) or temperature <= 0:
        raise InvalidInput(f"temperature must be positive, got {temperature!r}")


def log_softmax(logits, temperature=1.0, axis=-1):
    """Numerically stable log-softmax of ``logits / temperature``."""
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_array(logits, temperature=1.0, axis=-1):
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, temperature=1.0):
    """Temperature-scaled softmax as a :class:`CategoricalDist`."""
    logits = _check_logits(logits)
    _check_temperature(temperature)
    if logits.ndim != 1 or logits.size == 0:
        raise InvalidInput("softmax expects a non-empty logit vector")
    return CategoricalDist(softmax_array(logits, temperature))


def top_p_order(p):
    """Token order by descending probability, ties by ascending index."""
    # lexsort uses the last key as primary
    return np.lexsort((np.arange(p.size), -p))


def top_p_filter(dist, p):
    """Nucleus filter: keep the smallest high-probability prefix with mass >= p."""
    if not (0 < p <= 1):
        raise InvalidInput(f"top_p must lie in (0, 1], got {p!r}")
    probs = dist.probabilities
    if p == 1:
        return dist
    order = top_p_order(probs)
    cum = np.cumsum(probs[order])
    n_keep = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    n_keep = min(n_keep, probs.size)
    keep = np.zeros(probs.size, dtype=bool)
    keep[order[:n_keep]] = True
    out = np.where(keep, probs, 0.0)
    return CategoricalDist(out / out.sum())


def shannon_entropy(dist, base="natural"):
    """Entropy with ``0 log 0 = 0``; ``base`` is ``"natural"`` or ``"two"``."""
    p = dist.probabilities if isinstance(dist, CategoricalDist) else np.asarray(dist, dtype=float)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    if base == "two":
        return h / np.log(2.0)
    if base != "natural":
        raise InvalidInput(f"unknown entropy base {base!r}")
    return h
