"""Comparison metrics between a base and a fine-tuned generator.

Covers pass@k (plugin and unbiased), the support partition with the
Expansion-Shrinkage Ratio, positional entropy, perplexity, pairwise
diversity, novelty and recovery rate, plus the sample-log file format.
"""
from __future__ import annotations

from collections import OrderedDict
import csv
from dataclasses import dataclass, field
import io
import json
import math

import numpy as np

from .core import Alphabet, CategoricalDist, shannon_entropy
from .exceptions import InvalidInput, ParseError

ESTIMATORS = ("plugin", "unbiased")


# -- sample logs -------------------------------------------------------------


@dataclass
class SampleLog:
    """Generated samples grouped by context, in generation order.

    ``samples[context_id]`` is a list of ``(tokens, log_prob, n_tokens)``
    triples.
    """

    model_tag: str
    samples: "OrderedDict[str, list]" = field(default_factory=OrderedDict)
    k_max: int | None = None

    def add(self, context_id, tokens, log_prob, n_tokens=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        n_tokens = int(tokens.size if n_tokens is None else n_tokens)
        self.samples.setdefault(str(context_id), []).append((tokens, float(log_prob), n_tokens))

    @property
    def contexts(self):
        return list(self.samples)

    def sequences(self, context_id, k=None):
        rows = self.samples[context_id][:k]
        return [r[0] for r in rows]

    def all_sequences(self):
        return [r[0] for rows in self.samples.values() for r in rows]

    def log_probs(self):
        return np.array([r[1] for rows in self.samples.values() for r in rows])

    def token_counts(self):
        return np.array([r[2] for rows in self.samples.values() for r in rows])

    def min_samples(self):
        return min((len(v) for v in self.samples.values()), default=0)

    def check_k(self, k):
        if self.min_samples() < k:
            raise InvalidInput(f"log {self.model_tag!r} has a context with fewer than k={k} samples")

    def records(self, alphabet=None):
        alphabet = alphabet or Alphabet()
        for cid, rows in self.samples.items():
            for i, (tokens, lp, nt) in enumerate(rows):
                yield {"context_id": cid, "model_tag": self.model_tag, "sample_index": i,
                       "sequence": alphabet.decode(tokens), "log_prob": lp, "n_tokens": nt}

    def to_jsonl(self, alphabet=None):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records(alphabet))

    @classmethod
    def from_jsonl(cls, text, alphabet=None):
        alphabet = alphabet or Alphabet()
        log = None
        expected = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cid, tag, idx = str(rec["context_id"]), rec["model_tag"], int(rec["sample_index"])
                tokens = alphabet.encode(rec["sequence"])
                lp = float(rec["log_prob"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad sample record: {exc}", lineno) from None
            if log is None:
                log = cls(tag)
            elif tag != log.model_tag:
                raise ParseError(f"mixed model tags {log.model_tag!r} and {tag!r}", lineno)
            if idx != expected.get(cid, 0):
                raise ParseError(f"sample_index {idx} out of order for context {cid!r}", lineno)
            expected[cid] = idx + 1
            log.add(cid, tokens, lp, rec.get("n_tokens"))
        if log is None:
            raise ParseError("empty sample log")
        return log


# -- pass@k ---------------------------------------------------------------------


def pass_at_k_plugin(n, c, k):
    if k == 1:
        return c / n  # avoids the rounding of 1 - (1 - p)
    return 1.0 - (1.0 - c / n) ** k


def pass_at_k_unbiased(n, c, k):
    """``1 - C(n-c, k) / C(n, k)`` in product form."""
    if n - c < k:
        return 1.0
    return 1.0 - float(np.prod(1.0 - k / np.arange(n - c + 1, n + 1)))


@dataclass(frozen=True)
class PassAtK:
    k: int
    estimator: str
    per_context: np.ndarray
    mean: float


def pass_at_k(success_flags, k, estimator="plugin"):
    """pass@k per context and averaged.

    ``success_flags`` is a list (or dict) of per-context boolean sequences.
    """
    if estimator not in ESTIMATORS:
        raise InvalidInput(f"estimator must be one of {ESTIMATORS}")
    if k < 1:
        raise InvalidInput("k must be >= 1")
    flags = list(success_flags.values()) if isinstance(success_flags, dict) else list(success_flags)
    if not flags:
        raise InvalidInput("no contexts")
    fn = pass_at_k_plugin if estimator == "plugin" else pass_at_k_unbiased
    vals = []
    for f in flags:
        f = np.asarray(f, dtype=bool)
        n, c = f.size, int(f.sum())
        if k > n:
            raise InvalidInput(f"k={k} exceeds the {n} samples of a context")
        vals.append(fn(n, c, k))
    vals = np.array(vals)
    return PassAtK(k, estimator, vals, float(vals.mean()))


def k_grid(k_max):
    """Powers of two up to ``k_max`` (``k_max`` itself included)."""
    ks, k = [], 1
    while k < k_max:
        ks.append(k)
        k *= 2
    ks.append(k_max)
    return ks


# -- support partition ----------------------------------------------------------


@dataclass(frozen=True)
class SupportReport:
    preservation: int
    expansion: int
    shrinkage: int
    out_of_support: int
    k: int | None = None
    contexts: dict = field(default_factory=dict, compare=False)

    @property
    def total(self):
        return self.preservation + self.expansion + self.shrinkage + self.out_of_support

    @property
    def esr(self):
        """``expansion / shrinkage``; inf when only shrinkage is 0, nan when both are."""
        if self.shrinkage == 0:
            return math.inf if self.expansion > 0 else math.nan
        return self.expansion / self.shrinkage

    @property
    def inverse_esr(self):
        if self.expansion == 0:
            return math.inf if self.shrinkage > 0 else math.nan
        return self.shrinkage / self.expansion

    @property
    def esr_label(self):
        esr = self.esr
        if math.isnan(esr):
            return "undefined"
        if math.isinf(esr):
            return "inf"
        return f"{esr:.2f}"

    def as_dict(self):
        esr = self.esr
        return {
            "k": self.k, "preservation": self.preservation, "expansion": self.expansion,
            "shrinkage": self.shrinkage, "out_of_support": self.out_of_support,
            "esr": None if math.isnan(esr) or math.isinf(esr) else esr, "esr_label": self.esr_label,
        }


def support_from_solved(base_solved, tuned_solved, k=None):
    """Partition contexts given per-context solved flags (dicts keyed by context)."""
    if set(base_solved) != set(tuned_solved):
        missing = sorted(set(base_solved) ^ set(tuned_solved))
        raise InvalidInput(f"context sets differ: {missing}")
    groups = {"preservation": [], "expansion": [], "shrinkage": [], "out_of_support": []}
    for cid in base_solved:
        b, t = bool(base_solved[cid]), bool(tuned_solved[cid])
        key = "preservation" if b and t else "expansion" if t else "shrinkage" if b else "out_of_support"
        groups[key].append(cid)
    return SupportReport(*(len(groups[g]) for g in groups), k=k, contexts=groups)


def support_from_counts(preservation, expansion, shrinkage, out_of_support, k=None):
    return SupportReport(int(preservation), int(expansion), int(shrinkage), int(out_of_support), k=k)


def success_flags(success, seqs):
    """Apply a success predicate to a list of sequences."""
    if not seqs:
        return np.zeros(0, dtype=bool)
    if hasattr(success, "batch"):
        return np.asarray(success.batch(np.stack(seqs)), dtype=bool)
    return np.array([bool(success(s)) for s in seqs])


class OracleSuccess:
    """Success predicate ``oracle(seq) >= threshold``."""

    def __init__(self, oracle, threshold):
        self.oracle = oracle
        self.threshold = float(threshold)

    def batch(self, seqs):
        return self.oracle.batch(seqs) >= self.threshold

    def __call__(self, seq):
        return bool(self.oracle(seq) >= self.threshold)


def _check_same_contexts(base, tuned):
    if set(base.contexts) != set(tuned.contexts):
        only_base = sorted(set(base.contexts) - set(tuned.contexts))
        only_tuned = sorted(set(tuned.contexts) - set(base.contexts))
        raise InvalidInput(f"logs cover different contexts (base only: {only_base}, tuned only: {only_tuned})")


def support_partition(base, tuned, success, k):
    """Support partition at ``k`` using the first ``k`` samples of each context."""
    _check_same_contexts(base, tuned)
    base.check_k(k)
    tuned.check_k(k)
    solved_b = {c: success_flags(success, base.sequences(c, k)).any() for c in base.contexts}
    solved_t = {c: success_flags(success, tuned.sequences(c, k)).any() for c in base.contexts}
    return support_from_solved(solved_b, solved_t, k)


# -- sequence metrics ---------------------------------------------------------------


def _as_matrix(samples):
    lengths = {len(s) for s in samples}
    if len(lengths) == 1:
        return np.stack([np.asarray(s, dtype=np.int64) for s in samples])
    return None


def positional_entropy(samples, positions=None, base="natural"):
    """Entropy of the empirical residue distribution at each position."""
    if len(samples) == 0:
        raise InvalidInput("no samples")
    positions = range(min(len(s) for s in samples)) if positions is None else positions
    out = []
    for p in positions:
        try:
            col = np.array([s[p] for s in samples], dtype=np.int64)
        except IndexError:
            raise InvalidInput(f"position {p} is beyond a sample's length") from None
        counts = np.bincount(col)
        out.append(shannon_entropy(CategoricalDist(counts / counts.sum()), base))
    return np.array(out)


def perplexity(log_probs, token_counts):
    """``exp(-sum(log_probs) / sum(token_counts))``."""
    log_probs = np.asarray(log_probs, dtype=float)
    token_counts = np.asarray(token_counts, dtype=float)
    if np.any(token_counts <= 0):
        raise InvalidInput("token counts must be positive")
    return float(np.exp(-log_probs.sum() / token_counts.sum()))


def sequence_identity(a, b):
    """Positional identity: matches over the shared prefix divided by the longer length."""
    a, b = np.asarray(a), np.asarray(b)
    m = min(a.size, b.size)
    return float(np.count_nonzero(a[:m] == b[:m]) / max(a.size, b.size))


def mean_pairwise_similarity(samples):
    """Mean identity over unordered pairs of samples."""
    n = len(samples)
    if n < 2:
        raise InvalidInput("need at least two samples")
    mat = _as_matrix(samples)
    n_pairs = n * (n - 1) / 2
    if mat is not None:
        # matching pairs at a position = sum over residues of C(count, 2)
        total = 0
        for col in mat.T:
            counts = np.bincount(col)
            total += int((counts * (counts - 1) // 2).sum())
        return total / (n_pairs * mat.shape[1])
    sims = [sequence_identity(samples[i], samples[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(sims))


def pairwise_diversity(samples):
    """``1 - mean_pairwise_similarity``."""
    return 1.0 - mean_pairwise_similarity(samples)


def novelty(samples, reference, chunk=256):
    """Mean over samples of ``1 - max`` identity to any reference sequence."""
    if len(reference) == 0:
        raise InvalidInput("reference set must be non-empty")
    if len(samples) == 0:
        raise InvalidInput("no samples")
    smat, rmat = _as_matrix(samples), _as_matrix(reference)
    if smat is not None and rmat is not None and smat.shape[1] == rmat.shape[1]:
        best = np.empty(smat.shape[0])
        for i in range(0, smat.shape[0], chunk):
            block = smat[i:i + chunk]
            matches = (block[:, None, :] == rmat[None, :, :]).sum(axis=2)
            best[i:i + chunk] = matches.max(axis=1) / smat.shape[1]
        return float(np.mean(1.0 - best))
    terms = [1.0 - max(sequence_identity(s, r) for r in reference) for s in samples]
    return float(np.mean(terms))


def recovery_rate(generated, native):
    generated, native = np.asarray(generated), np.asarray(native)
    if generated.shape != native.shape:
        raise InvalidInput("generated and native sequences must have equal length")
    return float(np.mean(generated == native))


# -- reports ----------------------------------------------------------------------


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def evaluate(base, tuned, success, k_max=None, positions=None, reference=None, natives=None):
    """Full base-vs-tuned comparison.

    Returns ``(tables, summary)``: ``tables`` maps CSV file names to their
    text, ``summary`` is a JSON-serializable dictionary.  ``natives`` maps
    context ids to native sequences for the recovery rate; ``reference``
    is the novelty reference set (defaults to the base samples).
    """
    _check_same_contexts(base, tuned)
    k_max = k_max or min(base.min_samples(), tuned.min_samples())
    base.check_k(k_max)
    tuned.check_k(k_max)
    ks = k_grid(k_max)
    flags = {}
    for tag, log in (("base", base), ("tuned", tuned)):
        flags[tag] = {c: success_flags(success, log.sequences(c)) for c in base.contexts}

    pass_rows, pass_summary = [], {}
    for tag in ("base", "tuned"):
        for est in ESTIMATORS:
            for k in ks:
                res = pass_at_k(flags[tag], k, est)
                pass_rows.append((tag, est, k, res.mean))
                pass_summary.setdefault(tag, {}).setdefault(est, {})[str(k)] = res.mean

    support_rows, support_summary = [], []
    for k in ks:
        rep = support_from_solved(
            {c: flags["base"][c][:k].any() for c in base.contexts},
            {c: flags["tuned"][c][:k].any() for c in base.contexts}, k)
        d = rep.as_dict()
        support_summary.append(d)
        support_rows.append((k, rep.preservation, rep.expansion, rep.shrinkage, rep.out_of_support,
                             rep.esr if math.isfinite(rep.esr) else rep.esr_label))

    entropy_rows, metric_rows, metrics = [], [], {}
    reference = reference if reference is not None else base.all_sequences()
    for tag, log in (("base", base), ("tuned", tuned)):
        seqs = log.all_sequences()
        ent = positional_entropy(seqs, positions)
        pos_list = list(range(len(ent))) if positions is None else list(positions)
        entropy_rows.extend((tag, p, float(h)) for p, h in zip(pos_list, ent))
        m = {
            "perplexity": perplexity(log.log_probs(), log.token_counts()),
            "diversity": pairwise_diversity(seqs) if len(seqs) > 1 else float("nan"),
            "novelty": novelty(seqs, reference),
            "success_rate": float(np.mean(np.concatenate(list(flags[tag].values())))),
        }
        if natives:
            rec = [recovery_rate(s, natives[c]) for c in log.contexts for s in log.sequences(c)]
            m["recovery"] = float(np.mean(rec))
        metrics[tag] = m
        metric_rows.extend((tag, name, float(v)) for name, v in m.items())

    tables = {
        "passk.csv": _csv(pass_rows, ("model", "estimator", "k", "pass_at_k")),
        "support.csv": _csv(support_rows, ("k", "preservation", "expansion", "shrinkage", "out_of_support", "esr")),
        "entropy.csv": _csv(entropy_rows, ("model", "position", "entropy_nats")),
        "metrics.csv": _csv(metric_rows, ("model", "metric", "value")),
    }
    summary = {
        "contexts": len(base.contexts), "k_max": k_max, "pass_at_k": pass_summary,
        "support": support_summary, "metrics": metrics,
    }
    return tables, summary
