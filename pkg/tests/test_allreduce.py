"""Tests for ring scheduling quotas, stream folding, and the flat oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piratesim.aggregation import AggregatorSpec, Gradient, mean
from piratesim.allreduce import (StreamValue, chunk_quota, combine_finals,
                                 default_gradients_per_step,
                                 expected_handoffs, fold, oracle_aggregate,
                                 visit_quotas)

MEAN = AggregatorSpec(kind="mean")


def grads_from(vectors):
    return [Gradient(values=np.asarray(v, dtype=float), payload_bytes=64,
                     origin=i) for i, v in enumerate(vectors)]


def test_default_gradients_per_step():
    assert default_gradients_per_step(50, 100) == 25
    assert default_gradients_per_step(4, 16) == 1
    assert default_gradients_per_step(30, 30) == 30
    assert default_gradients_per_step(2, 64) == 1   # floor at 1


def test_visit_quotas_front_loaded():
    assert visit_quotas(50, 4) == [13, 13, 12, 12]
    assert visit_quotas(4, 8) == [1, 1, 1, 1, 0, 0, 0, 0]
    assert visit_quotas(50, 1) == [50]
    for c, k in ((50, 4), (4, 8), (7, 3)):
        assert sum(visit_quotas(c, k)) == c


def test_chunk_quota():
    assert chunk_quota(13, 4) == [4, 4, 4, 1]
    assert chunk_quota(4, 4) == [4]
    assert chunk_quota(0, 4) == [0]
    assert chunk_quota(3, 10) == [3]


def test_expected_handoffs():
    assert expected_handoffs(8, 4) == 2
    assert expected_handoffs(16, 4) == 6
    assert expected_handoffs(32, 4) == 14
    assert expected_handoffs(50, 50) == 0


def test_fold_initial_selection():
    sv = fold(MEAN, grads_from([(2.0, 0.0), (4.0, 2.0)]), None, stream_id=0)
    assert np.allclose(sv.values, [3.0, 1.0])
    assert sv.count == 2


def test_fold_chains_count_weighted():
    first = fold(MEAN, grads_from([(0.0,), (6.0,)]), None, stream_id=1)
    second = fold(MEAN, grads_from([(9.0,)]), first, stream_id=1)
    # flat mean of {0, 6, 9} is 5, not the pairwise mean of 3 and 9
    assert np.allclose(second.values, [5.0])
    assert second.count == 3


def test_fold_empty_selection_passes_stream_through():
    sv = StreamValue(0, np.array([1.0, 2.0]), count=4, payload_bytes=64)
    out = fold(MEAN, [], sv, stream_id=0)
    assert np.array_equal(out.values, sv.values)
    assert out.count == 4
    with pytest.raises(ValueError):
        fold(MEAN, [], None, stream_id=0)


def test_stream_digest_covers_values_count_and_id():
    a = StreamValue(0, np.array([1.0]), 1, 64)
    b = StreamValue(0, np.array([1.0]), 2, 64)
    c = StreamValue(1, np.array([1.0]), 1, 64)
    d = StreamValue(0, np.array([2.0]), 1, 64)
    assert len({a.digest(), b.digest(), c.digest(), d.digest()}) == 4


def test_combine_finals_uses_canonical_stream_order():
    s0 = StreamValue(0, np.array([1.0]), count=1, payload_bytes=64)
    s1 = StreamValue(1, np.array([4.0]), count=3, payload_bytes=64)
    fwd = combine_finals([s0, s1])
    rev = combine_finals([s1, s0])
    assert np.array_equal(fwd, rev)
    assert np.allclose(fwd, [(1.0 + 3 * 4.0) / 4])


def test_combine_single_stream_is_identity():
    s = StreamValue(0, np.array([7.0, 8.0]), count=9, payload_bytes=64)
    assert np.array_equal(combine_finals([s]), s.values)


def test_oracle_two_committees_equals_flat_mean():
    # committee 0 holds gradients a, b; committee 1 holds c, d.
    # stream 0: folded by committee 0 at visit 0 then committee 1 at
    # visit 1; stream 1 the other way round.
    a, b, c, d = grads_from([(1.0, 1.0), (3.0, 5.0), (7.0, 9.0), (1.0, 1.0)])
    selections = [
        [[[a]], [[d]]],     # committee 0: visit 0 folds a, visit 1 folds d
        [[[c]], [[b]]],     # committee 1: visit 0 folds c, visit 1 folds b
    ]
    out = oracle_aggregate(MEAN, selections)
    flat = mean([a, b, c, d]).values
    assert np.allclose(out, flat, atol=1e-15)


def test_oracle_rejects_stream_with_no_gradients():
    a, = grads_from([(1.0,)])
    selections = [[[[a]], [[]]], [[[]], [[]]]]
    with pytest.raises(ValueError):
        oracle_aggregate(MEAN, selections)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100, allow_nan=False),
                         min_size=3, max_size=3),
                min_size=1, max_size=24),
       st.integers(1, 6))
def test_chained_folds_reproduce_flat_mean(vectors, chunk_size):
    gs = grads_from(vectors)
    stream = None
    for start in range(0, len(gs), chunk_size):
        stream = fold(MEAN, gs[start:start + chunk_size], stream, stream_id=0)
    flat = mean(gs).values
    assert stream.count == len(gs)
    assert np.allclose(stream.values, flat, rtol=1e-12, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5).flatmap(
    lambda k: st.lists(
        st.lists(st.lists(st.floats(-20, 20, allow_nan=False),
                          min_size=2, max_size=2),
                 min_size=1, max_size=4),
        min_size=k, max_size=k)))
def test_oracle_with_round_robin_schedule_is_flat_mean(per_committee):
    # committee k's local gradients split one per visit, padding with
    # empty selections; every stream still sees every gradient exactly once
    k = len(per_committee)
    grads = {}
    for ki, vecs in enumerate(per_committee):
        grads[ki] = grads_from(vecs)
    selections = []
    for ki in range(k):
        local = grads[ki]
        base, extra = divmod(len(local), k)
        visits, cursor = [], 0
        for r in range(k):
            take = base + (1 if r < extra else 0)
            visits.append([local[cursor:cursor + take]])
            cursor += take
        selections.append(visits)
    out = oracle_aggregate(MEAN, selections)
    flat = mean([g for ki in range(k) for g in grads[ki]]).values
    assert np.allclose(out, flat, rtol=1e-12, atol=1e-9)
