import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.errors import CurationFailed
from gradleak.exclusivity import (
    ExanTable,
    State,
    UniformSampler,
    audit_batch,
    classify_batch,
    curate_insecure_batch,
    exan_counts,
    insecure_proportion,
)
from gradleak.model import ActivationPattern, Batch, generate_model, pattern_of


def brute_force_exans(masks):
    """ExAN rule evaluated by a double loop over neurons and samples."""
    M = masks[0].shape[0]
    out = [[[] for _ in masks] for _ in range(M)]
    for l, mk in enumerate(masks):
        for j in range(mk.shape[1]):
            active = [m for m in range(M) if mk[m, j]]
            if len(active) == 1:
                out[active[0]][l].append(j)
    return out


def pat(*layers):
    return ActivationPattern([np.array(l, dtype=bool) for l in layers])


def test_single_sample_every_active_neuron_is_exclusive():
    t = exan_counts(pat([[1, 0, 1, 1]], [[0, 1, 1]]))
    assert t.counts.tolist() == [[3, 2]]


def test_layer_one_example():
    t = exan_counts(pat([[1, 0, 1, 0], [0, 1, 1, 0]]))
    assert [ix.tolist() for ix in (t.indices[0][0], t.indices[1][0])] == [[0], [1]]
    assert t.counts[:, 0].tolist() == [1, 1]


def test_two_sample_last_layer_example():
    t = exan_counts(pat([[1, 1, 1, 0, 0], [0, 0, 1, 1, 1]]))
    assert t.indices[0][0].tolist() == [0, 1]
    assert t.indices[1][0].tolist() == [3, 4]


@settings(max_examples=60, deadline=None)
@given(M=st.integers(1, 6), widths=st.lists(st.integers(1, 12), min_size=1, max_size=4), seed=st.integers(0, 2**31))
def test_exan_counts_matches_brute_force(M, widths, seed):
    rng = np.random.default_rng(seed)
    masks = [rng.random((M, w)) < rng.uniform(0.1, 0.9) for w in widths]
    t = exan_counts(ActivationPattern(masks))
    oracle = brute_force_exans(masks)
    for m in range(M):
        for l in range(len(widths)):
            assert t.indices[m][l].tolist() == oracle[m][l]
    # disjoint across samples
    for l in range(len(widths)):
        seen = np.concatenate([t.indices[m][l] for m in range(M)])
        assert np.unique(seen).size == seen.size


def table(counts):
    return ExanTable([[np.arange(c) for c in row] for row in counts])


def test_classify_examples():
    assert classify_batch(table([[1, 2], [1, 2], [3, 2]]), 3, 100).state is State.INSECURE
    assert classify_batch(table([[0, 3]] * 8), 8, 7).state is State.SECURE
    assert classify_batch(table([[1, 2], [1, 1], [2, 5]]), 3, 100).state is State.OTHER
    # M must exceed d1 for Secure
    assert classify_batch(table([[0, 3]] * 7), 7, 7).state is State.OTHER


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.lists(st.integers(0, 3), min_size=2, max_size=2), min_size=1, max_size=6), d1=st.integers(1, 8), seed=st.integers(0, 1000))
def test_classify_invariant_to_sample_order(counts, d1, seed):
    perm = np.random.default_rng(seed).permutation(len(counts))
    a = classify_batch(table(counts), len(counts), d1)
    b = classify_batch(table([counts[p] for p in perm]), len(counts), d1)
    assert a.state is b.state
    expected_insecure = all(r[1] >= 2 and r[0] >= 1 for r in counts)
    expected_secure = all(r[0] == 0 for r in counts) and len(counts) > d1
    want = State.INSECURE if expected_insecure else State.SECURE if expected_secure else State.OTHER
    assert a.state is want
    assert sorted(e["exan_counts"] for e in a.evidence) == sorted(e["exan_counts"] for e in b.evidence)


class FixedSource:
    def __init__(self, batch):
        self.batch = batch

    def __call__(self, rng, batch_size):
        return self.batch


def test_insecure_source_returns_immediately(deep_case):
    params, batch, _ = deep_case
    assert insecure_proportion(params, FixedSource(batch), 1, batch.size, 0) == 1.0
    got, trials = curate_insecure_batch(params, FixedSource(batch), 5, 0, batch.size)
    assert trials == 1 and got is batch


def test_width_one_pigeonhole():
    params = generate_model((4, 1, 3), 0)
    sampler = UniformSampler(4, 3)
    assert insecure_proportion(params, sampler, 50, 2, 0) == 0.0
    with pytest.raises(CurationFailed) as info:
        curate_insecure_batch(params, sampler, 30, 0, 2)
    assert info.value.trials == 30


def test_curation_on_wide_model_records_trials():
    params = generate_model((48, 512, 10), 0)
    batch, trials = curate_insecure_batch(params, UniformSampler(48, 10), 1000, 0, 8)
    assert 1 <= trials <= 1000
    assert audit_batch(params, batch).state is State.INSECURE


def test_proportion_deterministic():
    params = generate_model((16, 200, 5), 1)
    s = UniformSampler(16, 5)
    assert insecure_proportion(params, s, 40, 4, 9) == insecure_proportion(params, s, 40, 4, 9)


def test_width_sweep_trend():
    trials = 1000
    props = [
        insecure_proportion(generate_model((48, w, 10), 0), UniformSampler(48, 10), trials, 8, 1)
        for w in (300, 400, 500, 600, 700)
    ]
    for a, b in zip(props, props[1:]):
        se = np.sqrt(max(a * (1 - a), b * (1 - b), 1e-3) / trials)
        assert b >= a - 3 * se
    assert props[-1] > props[0]


def test_audit_reports_evidence_and_first_layer_equality():
    params = generate_model((6, 3, 4), 0)
    batch = Batch(np.random.default_rng(0).uniform(-1, 1, (5, 6)), np.zeros(5, dtype=int))
    st_ = audit_batch(params, batch)
    assert len(st_.evidence) == 5
    first = pattern_of(params, batch).layer(1)
    assert st_.same_first_layer_pattern == bool(np.all(first == first[:1]))
    assert st_.to_dict()["state"] in {"Insecure", "Secure", "Other"}
