import csv
import io
import json
import math
from itertools import product

from hypothesis import given, strategies as st
import numpy as np
import pytest

from seqrl.core import RngStream
from seqrl.evaluation import (
    OracleSuccess,
    SampleLog,
    evaluate,
    k_grid,
    mean_pairwise_similarity,
    novelty,
    pairwise_diversity,
    pass_at_k,
    pass_at_k_plugin,
    pass_at_k_unbiased,
    perplexity,
    positional_entropy,
    recovery_rate,
    sequence_identity,
    support_from_counts,
    support_from_solved,
    support_partition,
)
from seqrl.exceptions import InvalidInput, ParseError
from seqrl.policy import PositionCategoricalPolicy
from seqrl.rewards import make_phoq_like

from oracles import identity_ref, pass_at_k_comb, pass_at_k_enumerated, pass_at_k_enumerated_all


def is_success(seq):
    return int(seq[0]) == 0


def make_log(tag, rows):
    """rows: {context: list of token lists}."""
    log = SampleLog(tag)
    for cid, seqs in rows.items():
        for s in seqs:
            log.add(cid, s, -1.0)
    return log


# -- pass@k -----------------------------------------------------------------------


def test_plugin_examples():
    flags = [[True, False, True, False]]
    assert pass_at_k(flags, 1).mean == 0.5
    assert pass_at_k(flags, 2).mean == 0.75
    assert pass_at_k([[True] * 5], 3).mean == 1.0
    assert pass_at_k([[True] * 5], 3, "unbiased").mean == 1.0


def test_plugin_pass1_equals_success_rate():
    rng = np.random.default_rng(0)
    flags = [rng.random(37) < 0.2 for _ in range(9)]
    res = pass_at_k(flags, 1)
    np.testing.assert_array_equal(res.per_context, [f.mean() for f in flags])


def test_unbiased_matches_exhaustive_enumeration_small_n():
    for n in range(1, 17):
        table = pass_at_k_enumerated_all(n)
        for c in range(n + 1):
            for k in range(1, n + 1):
                assert abs(pass_at_k_unbiased(n, c, k) - float(table[c, k])) < 1e-12, (n, c, k)


def test_enumeration_oracles_agree():
    for n, c, k in [(6, 2, 3), (10, 0, 4), (12, 5, 12), (9, 9, 1)]:
        assert pass_at_k_enumerated(n, c, k) == pass_at_k_comb(n, c, k)


def test_unbiased_large_n_frozen():
    # frozen from the exact rational 1 - C(115, 32) / C(128, 32)
    expected = 0.9809346118267445
    assert float(pass_at_k_comb(128, 13, 32)) == pytest.approx(expected, abs=1e-15)
    assert pass_at_k_unbiased(128, 13, 32) == pytest.approx(expected, abs=1e-12)


def test_k_exceeds_n():
    with pytest.raises(InvalidInput):
        pass_at_k([[True, False]], 3)
    with pytest.raises(InvalidInput):
        pass_at_k([[True]], 0)
    with pytest.raises(InvalidInput):
        pass_at_k([[True]], 1, "bootstrap")


@given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n))))
def test_pass_at_k_non_decreasing(nc):
    n, c = nc
    for fn in (pass_at_k_plugin, pass_at_k_unbiased):
        vals = [fn(n, c, k) for k in range(1, n + 1)]
        assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
        assert all(0.0 <= v <= 1.0 for v in vals)


def test_unbiased_estimator_expectation_over_subsampling():
    # population of N samples with C successes; the estimator on random n-subsets averages to
    # the probability that a random k-subset of the population contains a success
    rng = np.random.default_rng(3)
    big_n, big_c, n, k = 64, 9, 16, 4
    pop = np.zeros(big_n, bool)
    pop[:big_c] = True
    est = [pass_at_k_unbiased(n, int(rng.choice(pop, n, replace=False).sum()), k) for _ in range(10_000)]
    assert abs(np.mean(est) - float(pass_at_k_comb(big_n, big_c, k))) < 1e-2


def test_k_grid():
    assert k_grid(1) == [1]
    assert k_grid(32) == [1, 2, 4, 8, 16, 32]
    assert k_grid(12) == [1, 2, 4, 8, 12]


# -- support partition -------------------------------------------------------------


@pytest.mark.parametrize("expansion,shrinkage,label", [(7, 49, "0.14"), (8, 100, "0.08"), (2, 4, "0.50")])
def test_esr_fixtures(expansion, shrinkage, label):
    rep = support_from_counts(290, expansion, shrinkage, 4)
    assert round(rep.esr, 2) == float(label)
    assert rep.esr_label == label


def test_esr_ablation_fixture_is_not_reciprocal():
    rep = support_from_counts(100, 12, 23, 0, k=32)
    assert rep.esr == pytest.approx(12 / 23) and round(rep.esr, 2) == 0.52
    assert round(rep.inverse_esr, 2) == 1.92


def test_esr_zero_shrinkage():
    assert support_from_counts(1, 3, 0, 0).esr == math.inf
    assert support_from_counts(1, 3, 0, 0).esr_label == "inf"
    assert math.isnan(support_from_counts(1, 0, 0, 0).esr)
    assert support_from_counts(1, 0, 0, 0).esr_label == "undefined"
    assert support_from_counts(1, 0, 0, 0).as_dict()["esr"] is None


@given(st.integers(0, 50), st.integers(1, 50))
def test_esr_greater_than_one_iff_expansion_dominates(e, s):
    assert (support_from_counts(0, e, s, 0).esr > 1) == (e > s)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_support_counts_partition_contexts(pairs):
    base = {f"c{i}": b for i, (b, _) in enumerate(pairs)}
    tuned = {f"c{i}": t for i, (_, t) in enumerate(pairs)}
    rep = support_from_solved(base, tuned)
    assert rep.total == len(pairs)
    assert rep.preservation == sum(b and t for b, t in pairs)
    assert rep.expansion == sum(t and not b for b, t in pairs)


def test_support_partition_uses_first_k_samples():
    base = make_log("base", {"a": [[0], [1]], "b": [[1], [1]], "c": [[1], [0]], "d": [[1], [1]]})
    tuned = make_log("tuned", {"a": [[0], [0]], "b": [[0], [1]], "c": [[1], [1]], "d": [[1], [0]]})
    rep1 = support_partition(base, tuned, is_success, 1)
    assert (rep1.preservation, rep1.expansion, rep1.shrinkage, rep1.out_of_support) == (1, 1, 0, 2)
    rep2 = support_partition(base, tuned, is_success, 2)
    assert (rep2.preservation, rep2.expansion, rep2.shrinkage, rep2.out_of_support) == (1, 2, 1, 0)
    assert rep2.contexts["shrinkage"] == ["c"]


def test_self_comparison():
    log = make_log("m", {"a": [[0], [1]], "b": [[1], [1]]})
    rep = support_partition(log, log, is_success, 2)
    assert rep.expansion == rep.shrinkage == 0 and rep.preservation == 1


def test_support_context_mismatch():
    a = make_log("a", {"x": [[0]], "y": [[0]]})
    b = make_log("b", {"x": [[0]], "z": [[0]]})
    with pytest.raises(InvalidInput, match="y.*z"):
        support_partition(a, b, is_success, 1)
    with pytest.raises(InvalidInput):
        support_partition(a, a, is_success, 2)  # fewer than k samples


def test_oracle_success():
    land = make_phoq_like(seed=0)
    pred = OracleSuccess(land, land.success_threshold)
    seqs = RngStream(0).integers(0, 20, (500, 4))
    np.testing.assert_array_equal(pred.batch(seqs), [pred(s) for s in seqs])


# -- sequence metrics ------------------------------------------------------------------


def test_positional_entropy_examples():
    assert np.all(positional_entropy([[1, 2, 3]] * 5) == 0)
    uniform = [[a] for a in range(20)]
    assert positional_entropy(uniform)[0] == pytest.approx(math.log(20), abs=1e-12)
    col = [[0], [0], [1], [2]]
    assert positional_entropy(col, base="two")[0] == pytest.approx(1.5, abs=1e-12)
    np.testing.assert_allclose(positional_entropy([[0, 1], [0, 2]], positions=[1]), [math.log(2)])
    with pytest.raises(InvalidInput):
        positional_entropy([])
    with pytest.raises(InvalidInput):
        positional_entropy([[0, 1], [0]], positions=[1])


def test_perplexity_examples():
    assert perplexity([4 * math.log(1 / 20)] * 7, [4] * 7) == pytest.approx(20, abs=1e-12)
    assert perplexity([0.0, 0.0], [3, 5]) == 1.0
    with pytest.raises(InvalidInput):
        perplexity([0.0], [0])


def test_perplexity_matches_per_token_replay():
    rng = np.random.default_rng(4)
    pol = PositionCategoricalPolicy(rng.normal(size=(4, 6)))
    seqs = pol.sample(50, RngStream(1))
    probs = np.exp(pol.logits) / np.exp(pol.logits).sum(axis=1, keepdims=True)
    nll, tokens = 0.0, 0
    for s in seqs:
        for i, a in enumerate(s):
            nll -= math.log(probs[i, a])
            tokens += 1
    ref = math.exp(nll / tokens)
    assert perplexity(pol.log_prob_batch(seqs), [4] * 50) == pytest.approx(ref, rel=1e-10)


def test_diversity_examples():
    assert pairwise_diversity([[1, 2, 3, 4]] * 3) == 0.0
    assert mean_pairwise_similarity([[0, 1, 2, 3], [0, 1, 2, 0]]) == 0.75
    with pytest.raises(InvalidInput):
        pairwise_diversity([[1, 2]])


def _brute_similarity(samples):
    n = len(samples)
    sims = [identity_ref(samples[i], samples[j]) for i in range(n) for j in range(i + 1, n)]
    return sum(sims) / len(sims)


def test_similarity_matches_pairwise_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(50):
        samples = [list(rng.integers(0, 3, 6)) for _ in range(5)]
        assert mean_pairwise_similarity(samples) == pytest.approx(_brute_similarity(samples), abs=1e-15)
        ragged = [list(rng.integers(0, 3, rng.integers(2, 7))) for _ in range(5)]
        assert mean_pairwise_similarity(ragged) == pytest.approx(_brute_similarity(ragged), abs=1e-15)


def test_sequence_identity_prefix_rule():
    assert sequence_identity([1, 2, 3], [1, 2]) == pytest.approx(2 / 3)
    assert sequence_identity([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0


def test_novelty_examples():
    ref = [[0, 1, 2], [3, 3, 3]]
    assert novelty([[0, 1, 2]], ref) == 0.0
    assert novelty([[5, 6, 7]], ref) == 1.0
    with pytest.raises(InvalidInput):
        novelty([[0, 1, 2]], [])


def test_novelty_matches_brute_force_scan():
    rng = np.random.default_rng(6)
    samples = [list(rng.integers(0, 4, 5)) for _ in range(30)]
    reference = [list(rng.integers(0, 4, 5)) for _ in range(20)]
    ref = np.mean([1 - max(identity_ref(s, r) for r in reference) for s in samples])
    assert novelty(samples, reference, chunk=7) == pytest.approx(ref, abs=1e-15)
    assert novelty(samples, samples + reference) == 0.0


@given(st.lists(st.lists(st.integers(0, 3), min_size=3, max_size=3), min_size=2, max_size=10),
       st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=5), min_size=1, max_size=5))
def test_diversity_and_novelty_in_unit_interval(samples, reference):
    assert 0.0 <= pairwise_diversity(samples) <= 1.0
    assert 0.0 <= novelty(samples, reference) <= 1.0


def test_recovery_examples():
    assert recovery_rate([1, 2, 3], [1, 2, 3]) == 1.0
    assert recovery_rate([1, 2, 3], [0, 0, 0]) == 0.0
    native = np.arange(10)
    gen = native.copy()
    gen[:3] += 1
    assert recovery_rate(gen, native) == pytest.approx(0.7)
    with pytest.raises(InvalidInput):
        recovery_rate([1, 2], [1, 2, 3])


# -- sample logs --------------------------------------------------------------------


def test_sample_log_roundtrip():
    log = make_log("tuned", {"c00": [[0, 1], [2, 3]], "c01": [[4, 5]]})
    text = log.to_jsonl()
    back = SampleLog.from_jsonl(text)
    assert back.model_tag == "tuned" and back.contexts == ["c00", "c01"]
    assert back.to_jsonl() == text
    rec = json.loads(text.splitlines()[0])
    assert set(rec) >= {"context_id", "model_tag", "sample_index", "sequence", "log_prob"}


@pytest.mark.parametrize("text", [
    "",
    "not json\n",
    '{"context_id": "a", "model_tag": "m", "sample_index": 1, "sequence": "A", "log_prob": 0}\n',
    '{"context_id": "a", "model_tag": "m", "sample_index": 0, "sequence": "A", "log_prob": 0}\n'
    '{"context_id": "a", "model_tag": "x", "sample_index": 1, "sequence": "A", "log_prob": 0}\n',
    '{"context_id": "a", "model_tag": "m", "sample_index": 0, "sequence": "Z", "log_prob": 0}\n',
])
def test_sample_log_parse_errors(text):
    with pytest.raises(ParseError):
        SampleLog.from_jsonl(text)


# -- full report --------------------------------------------------------------------


def _rows(table):
    return list(csv.DictReader(io.StringIO(table)))


def test_evaluate_constructed_counts_give_esr():
    # 7 expansion, 49 shrinkage, 2 preservation, 4 out-of-support contexts with one sample each
    spec = [(False, True)] * 7 + [(True, False)] * 49 + [(True, True)] * 2 + [(False, False)] * 4
    base, tuned = SampleLog("base"), SampleLog("tuned")
    for i, (b, t) in enumerate(spec):
        base.add(f"c{i:02d}", [0 if b else 1, 1], -1.0)
        tuned.add(f"c{i:02d}", [0 if t else 1, 2], -1.0)
    tables, summary = evaluate(base, tuned, is_success)
    sup = summary["support"][0]
    assert (sup["expansion"], sup["shrinkage"], sup["preservation"], sup["out_of_support"]) == (7, 49, 2, 4)
    assert sup["esr_label"] == "0.14"
    assert _rows(tables["support.csv"])[0]["expansion"] == "7"


def test_evaluate_report_properties():
    rng = RngStream(7)
    base, tuned = SampleLog("base"), SampleLog("tuned")
    for c in range(6):
        for _ in range(16):
            base.add(f"c{c}", rng.integers(0, 4, 3), -2.0)
            tuned.add(f"c{c}", rng.integers(0, 2, 3), -1.0)
    natives = {f"c{c}": np.zeros(3, int) for c in range(6)}
    tables, summary = evaluate(base, tuned, is_success, natives=natives)
    assert set(tables) == {"passk.csv", "support.csv", "entropy.csv", "metrics.csv"}
    for tag, est in product(("base", "tuned"), ("plugin", "unbiased")):
        curve = summary["pass_at_k"][tag][est]
        vals = [curve[str(k)] for k in k_grid(16)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert summary["metrics"]["tuned"]["perplexity"] == pytest.approx(math.exp(1 / 3))
    assert 0 <= summary["metrics"]["base"]["recovery"] <= 1
    json.dumps(summary)
    self_tables, self_summary = evaluate(base, base, is_success)
    assert all(s["expansion"] == s["shrinkage"] == 0 for s in self_summary["support"])
    assert self_tables == evaluate(base, base, is_success)[0]
