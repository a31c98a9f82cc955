"""Randomized invariants. The core numeric suites always run 1000 cases."""

from __future__ import annotations

import itertools

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expertspec import tensorio
from expertspec.estimator import EstimatorConfig, init_params
from expertspec.metrics import rank_alignment, recall_at_k
from expertspec.model import RouterDecision, decision_from_logits
from expertspec.numerics import kl_divergence, rms_norm, softmax, softmax64, top_k
from expertspec.schedule import (
    TimingModel,
    analytic_improvement,
    boundary_term,
    max_resident_layers,
    simulate_on_demand,
    simulate_prefetch,
)
from expertspec.speculation import ranked_ids

THOROUGH = settings(max_examples=1000, deadline=None)

finite = st.floats(-50, 50, allow_nan=False, width=32)
vectors = st.integers(1, 40).flatmap(lambda n: arrays(np.float32, n, elements=finite))
wide = st.integers(1, 256).flatmap(lambda n: arrays(np.float32, n, elements=st.floats(-1e4, 1e4, width=32)))


def _prob(n):
    return arrays(np.float64, n, elements=st.floats(0, 1, allow_nan=False)).filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


@st.composite
def decision_pairs(draw):
    E = draw(st.integers(1, 24))
    k = draw(st.integers(1, E))
    perm = st.permutations(range(E)).map(lambda p: tuple(p[:k]))
    a, b = draw(perm), draw(perm)
    return RouterDecision(a, (1 / k,) * k), RouterDecision(b, (1 / k,) * k)


# -- suites required to pass 1000 cases --------------------------------------


@THOROUGH
@given(wide)
def test_softmax_normalized(v):
    p = softmax(v)
    assert p.dtype == np.float32
    assert np.all(np.isfinite(p)) and np.all(p >= 0) and np.all(p <= 1)
    assert abs(float(p.sum(dtype=np.float64)) - 1.0) <= 1e-6
    assert p[np.argmax(v)] == p.max()


@THOROUGH
@given(vectors, st.data())
def test_top_k_matches_sort(v, data):
    k = data.draw(st.integers(1, v.size))
    idx, vals = top_k(v, k)
    want = [i for _, i in sorted((-float(x), i) for i, x in enumerate(v))][:k]
    assert idx.tolist() == want
    np.testing.assert_array_equal(vals, v[want])


@THOROUGH
@given(st.integers(1, 30).flatmap(lambda n: st.tuples(_prob(n), _prob(n))))
def test_kl_nonnegative(pq):
    p, q = pq
    assume(np.all(q[p > 0] > 0))
    kl = kl_divergence(p, q)
    assert kl >= -1e-12
    assert abs(kl_divergence(p, p)) <= 1e-12


@THOROUGH
@given(decision_pairs())
def test_recall_and_rank_recount(pair):
    pred, truth = pair
    hits = sum(1 for a in pred.ids for b in truth.ids if a == b)
    assert recall_at_k(pred, truth) == hits / truth.k
    assert rank_alignment(pred, truth) == [pred.ids[r] == truth.ids[r] for r in range(truth.k)]


# -- further invariants --------------------------------------------------------


@given(vectors, st.floats(-20, 20))
def test_softmax_shift_invariant(v, c):
    np.testing.assert_allclose(softmax(v), softmax(v + np.float32(c)), atol=1e-5)
    np.testing.assert_allclose(softmax(v), softmax64(v), atol=1e-6)


@given(st.integers(1, 24).flatmap(lambda E: st.tuples(st.integers(1, E), arrays(np.float32, (5, E), elements=finite))))
def test_batched_ranking_matches_decision(args):
    k, logits = args
    ids = ranked_ids(logits, k)
    for row, got in zip(logits, ids):
        assert tuple(got.tolist()) == decision_from_logits(row, k).ids


@given(st.integers(1, 24).flatmap(lambda E: st.tuples(st.integers(1, E), arrays(np.float32, E, elements=finite))))
def test_decision_gates_renormalized(args):
    k, logits = args
    for gating in ("softmax_topk", "topk_softmax"):
        d = decision_from_logits(logits, k, gating)
        assert len(set(d.ids)) == k
        assert abs(sum(d.gates) - 1) < 1e-5


@given(vectors.filter(lambda v: np.abs(v).max() > 1e-3), st.floats(0.1, 10))
def test_rms_norm_scale_invariant(v, a):
    g = np.ones_like(v)
    np.testing.assert_allclose(rms_norm(v, g, 0.0), rms_norm(v * np.float32(a), g, 0.0), rtol=1e-4, atol=1e-5)


@given(st.integers(1, 8), st.sampled_from([2, 4, 8]), st.integers(2, 6), st.integers(1, 5), st.integers(2, 3))
def test_param_count_enumerates(d8, m, E, L, n):
    cfg = EstimatorConfig(d=8 * d8, E=E, L=L, m=m, n=n)
    assert cfg.param_count() == init_params(cfg).count()


durations = st.integers(1, 12).flatmap(lambda L: st.tuples(*(arrays(np.float64, L, elements=st.floats(0, 100)) for _ in range(4))))


@given(durations)
def test_prefetch_never_slower(d):
    tm = TimingModel(*d)
    ond, pf = simulate_on_demand(tm), simulate_prefetch(tm)
    assert pf.tpot <= ond.tpot + 1e-9
    assert abs(ond.tpot - (tm.t_compute + tm.t_copy).sum()) < 1e-9
    assert abs((ond.tpot - pf.tpot) - analytic_improvement(tm)) <= boundary_term(tm) + 1e-9


@given(durations, st.integers(0, 11), st.floats(0, 50))
def test_more_copy_time_never_faster(d, layer, extra):
    tm = TimingModel(*d)
    assume(layer < tm.L)
    slower = tm.t_copy.copy()
    slower[layer] += extra
    tm2 = TimingModel(tm.t_attn, tm.t_gate, tm.t_expert, slower)
    assert simulate_prefetch(tm2).tpot >= simulate_prefetch(tm).tpot - 1e-9
    assert simulate_on_demand(tm2).tpot >= simulate_on_demand(tm).tpot - 1e-9


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(1, 20)).map(lambda t: (t[0], t[0] + t[1])), max_size=12))
def test_max_resident_brute_force(intervals):
    pts = sorted({p for iv in intervals for p in iv})
    mids = [(a + b) / 2 for a, b in itertools.pairwise(pts)] if pts else []
    want = max((sum(1 for s, e in intervals if s < x < e) for x in mids), default=0)
    assert max_resident_layers(intervals) == want


@given(st.integers(0, 3).flatmap(lambda n: arrays(np.float32, st.tuples(*[st.integers(0, 4)] * n), elements=finite)))
def test_moet_round_trip(a):
    b = tensorio.decode(tensorio.encode(a))
    assert b.shape == a.shape and b.dtype == np.float32
    np.testing.assert_array_equal(b, a)
