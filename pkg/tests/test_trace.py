from __future__ import annotations

import numpy as np
import pytest

from expertspec.model import DecodeState, forward_decode
from expertspec.trace import (
    FIELDS,
    TraceError,
    corpus_tokens,
    load_trace,
    random_tokens,
    record_trace,
    save_trace,
    windows,
)


def test_fields_and_shapes(tiny):
    tr = record_trace(tiny, [1, 2, 3, 4, 5], context=3)
    c = tiny.config
    assert tr.n_tokens == 5
    assert tr.s.shape == (5, c.L, c.H)
    assert tr.router_logits.shape == (5, c.L, c.E)
    assert tr.expert_out.shape == (5, c.L, c.k, c.H)
    assert tr.tokens.tolist() == [1, 2, 3, 4, 5]


def test_windows_restart_state(tiny):
    tr = record_trace(tiny, [7, 8, 9, 7], context=3)
    st = DecodeState.empty(tiny.config)
    recs = []
    forward_decode(tiny, st, 7, sink=recs.append)
    # token 3 starts a new window, so it sees the same state as token 0
    assert np.array_equal(tr.s[3], tr.s[0])
    assert np.array_equal(tr.s[0], np.stack([r.s for r in recs]))


def test_windows_split():
    assert [(s, list(c)) for s, c in windows(list(range(5)), 2)] == [(0, [0, 1]), (2, [2, 3]), (4, [4])]


def test_expert_out_matches_m(toy_trace):
    recombined = np.einsum("tlk,tlkh->tlh", toy_trace.exec_gates.astype(np.float64), toy_trace.expert_out.astype(np.float64))
    np.testing.assert_allclose(recombined, toy_trace.m, atol=1e-5)
    assert np.array_equal(toy_trace.ids, toy_trace.exec_ids)


def test_empty_workload(tiny):
    with pytest.raises(TraceError, match="empty workload"):
        record_trace(tiny, [])
    with pytest.raises(TraceError):
        record_trace(tiny, [1], context=0)


def test_bundle_round_trip(tmp_path, tiny):
    tr = record_trace(tiny, random_tokens(32, 9, 0))
    save_trace(tr, tmp_path)
    back = load_trace(tmp_path)
    for f in FIELDS:
        assert np.array_equal(getattr(back, f), getattr(tr, f)), f
    (tmp_path / "gates.moet").unlink()
    with pytest.raises(TraceError, match="missing"):
        load_trace(tmp_path)


def test_deterministic_bytes(tmp_path, tiny):
    toks = random_tokens(32, 12, 4)
    save_trace(record_trace(tiny, toks), tmp_path / "a")
    save_trace(record_trace(tiny, toks), tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_corpus_is_bytes(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(b"Hi\xff")
    assert corpus_tokens(p).tolist() == [72, 105, 255]


def test_random_tokens_seeded():
    a = random_tokens(256, 100, 3)
    assert a.tolist() == random_tokens(256, 100, 3).tolist()
    assert a.min() >= 0 and a.max() < 256
