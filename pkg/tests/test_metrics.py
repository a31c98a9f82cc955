from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from expertspec.metrics import (
    RunningMean,
    aggregate,
    drift_report,
    evaluate_trace,
    rank_alignment,
    recall_at_k,
    write_csv,
    write_eval_csvs,
)
from expertspec.model import RouterDecision
from expertspec.numerics import cosine_similarity, rms_norm
from expertspec.speculation import DefaultVectorTable, Oracle


def D(*ids):
    return RouterDecision(tuple(ids), tuple([1.0 / len(ids)] * len(ids)))


def test_recall_examples():
    assert recall_at_k(D(1, 2, 3, 4), D(1, 2, 3, 4)) == 1.0
    assert recall_at_k(D(1, 2), D(3, 4)) == 0.0
    assert recall_at_k(D(1, 2, 3, 4), D(3, 4, 5, 6)) == 0.5
    with pytest.raises(ValueError):
        recall_at_k(D(1), D(1, 2))


def test_rank_alignment_examples():
    assert rank_alignment(D(5, 1, 2), D(5, 1, 2)) == [True, True, True]
    assert rank_alignment(D(1, 2), D(2, 1)) == [False, False]
    with pytest.raises(ValueError):
        rank_alignment(D(1), D(1, 2))


def test_rank_alignment_random_pairs_vs_recount(rng):
    k, E, n = 4, 16, 10_000
    matches = np.zeros(k)
    brute = np.zeros(k)
    for _ in range(n):
        a = rng.permutation(E)[:k].tolist()
        b = rng.permutation(E)[:k].tolist()
        matches += rank_alignment(D(*a), D(*b))
        for r in range(k):
            brute[r] += 1 if a[r] == b[r] else 0
    assert matches.tolist() == brute.tolist()


def test_aggregate_means():
    (rep,) = aggregate([(0, "x", 0.25)])
    assert rep.mean("x") == 0.25 and rep.count("x") == 1
    (rep,) = aggregate([(3, "x", 0.2), (3, "x", 0.6)])
    assert rep.mean("x") == pytest.approx(0.4)
    reps = aggregate([(2, "a", 1.0), (0, "a", 0.0), (1, "a", 0.5)])
    assert [r.layer for r in reps] == [0, 1, 2]


def test_running_mean_million_records(rng):
    x = rng.uniform(1000, 1001, size=1_000_000)
    m = RunningMean()
    for chunk in np.array_split(x, 10):
        part = RunningMean()
        for v in chunk[:1000]:
            part.add(v)
        part.n, part.mean = len(chunk), float(np.mean(chunk))
        m.merge(part)
    assert m.mean == pytest.approx(float(np.sum(x) / len(x)), rel=1e-6)
    single = RunningMean()
    for v in x[:100_000]:
        single.add(v)
    assert single.mean == pytest.approx(float(x[:100_000].sum() / 100_000), rel=1e-6)


def test_csv_format(tmp_path):
    text = write_csv(tmp_path / "a.csv", ("layer", "v"), [(0, 1 / 3), (1, 1234567.0)])
    assert text == "layer,v\n0,0.333333\n1,1.23457e+06\n"
    assert (tmp_path / "a.csv").read_text() == text


def test_oracle_recall_and_rank_one(toy, toy_trace):
    res = evaluate_trace(toy, toy_trace.slice(0, 100), {"oracle": Oracle()}, drift=False)
    assert all(v == 1.0 for v in res.recall_curve("oracle"))
    assert all(ms[0].mean == 1.0 for ms in res.ranks["oracle"].values())


def test_drift_degenerate_and_collapse(toy, toy_trace):
    tr = toy_trace.slice(0, 120)
    same = replace(tr, s=np.repeat(tr.s[:, :1], tr.config.L, axis=1))
    _, base = drift_report(toy, same, DefaultVectorTable.zeros(8, 16, 64))
    np.testing.assert_allclose(base, 1.0, atol=1e-12)
    quasi, base = drift_report(toy, tr, DefaultVectorTable.zeros(8, 16, 64))
    for l in range(7):
        want = np.mean([cosine_similarity(rms_norm(tr.r[t, l], toy.layers[l + 1].moe_norm, toy.config.eps), tr.s[t, l + 1]) for t in range(tr.n_tokens)])
        assert quasi[l] == pytest.approx(want, abs=1e-9)
        want_b = np.mean([cosine_similarity(tr.s[t, l], tr.s[t, l + 1]) for t in range(tr.n_tokens)])
        assert base[l] == pytest.approx(want_b, abs=1e-9)


def test_drift_joint_rescaling(toy, toy_trace, toy_table):
    tr = toy_trace.slice(0, 80)
    scaled_table = DefaultVectorTable.from_arrays(toy_table.d * 3.0, toy_table.count)
    scaled = replace(tr, r=tr.r * 3.0)
    a, _ = drift_report(toy, tr, toy_table)
    b, _ = drift_report(toy, scaled, scaled_table)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_drift_errors(toy, toy_trace, toy_table):
    with pytest.raises(ValueError):
        drift_report(toy, toy_trace.slice(0, 0), toy_table)


def test_eval_csv_files(tmp_path, toy, toy_trace, toy_table):
    res = evaluate_trace(toy, toy_trace.slice(0, 30), {"oracle": Oracle()}, toy_table)
    texts = write_eval_csvs(res, tmp_path, "oracle")
    assert texts["hit_rate.csv"].splitlines()[0] == "layer,predictor,recall_at_k"
    assert texts["hit_rate.csv"].splitlines()[1] == "0,oracle,1"
    assert texts["drift.csv"].splitlines()[0] == "layer,cos_quasi,cos_baseline"
    assert texts["rank_align.csv"].splitlines()[1] == "0,1,1"
    assert len(texts["rank_align.csv"].splitlines()) == 1 + 7 * 4
