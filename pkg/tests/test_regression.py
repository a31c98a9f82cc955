"""Frozen measurements from the first verified run, checked against fresh recomputation."""

from __future__ import annotations

import csv
import json

import pytest

import make_fixtures as mf

FIX = mf.FIXTURES


def _table(text: str):
    header, *rows = csv.reader(text.splitlines())
    return header, [[float(x) for x in row] for row in rows]


@pytest.fixture(scope="module")
def bundle():
    return mf.build()


def _close(got: str, path, tol):
    (hg, rg), (hw, rw) = _table(got), _table(path.read_text())
    assert hg == hw
    for g, w in zip(rg, rw, strict=True):
        assert g == pytest.approx(w, abs=tol)


def test_router_pf_tokens(bundle):
    model, _, table = bundle
    assert mf.router_pf_tokens(model, table) == json.loads((FIX / "router_pf_tokens.json").read_text())


def test_drift_and_hit_rate_csvs(bundle):
    from expertspec.metrics import write_comparison_csv, write_csv

    res = mf.evaluation(*bundle)
    drift = write_csv(None, ("layer", "cos_quasi", "cos_baseline"), res.drift_rows())
    _close(drift, FIX / "drift.csv", 1e-5)
    hits = write_comparison_csv(res, None)
    _close(hits, FIX / "hit_rate_compare.csv", 1e-6)


def test_router_pf_mean_kl(bundle):
    model, _, table = bundle
    want = json.loads((FIX / "kl_router_pf.json").read_text())["mean_kl"]
    assert mf.mean_kl(model, table) == pytest.approx(want, rel=1e-4)


def test_estimator_curve(bundle):
    got = [[float(v) for v in row] for row in mf.curve(*bundle)]
    header, want = _table((FIX / "estimator_curve.csv").read_text())
    assert header == ["tokens", "val_kl", "val_hit_rate"]
    for g, w in zip(got, want, strict=True):
        assert g == pytest.approx(w, rel=1e-4, abs=1e-5)


def test_predictor_ordering_fixture_consistent():
    fx = json.loads((FIX / "predictor_ordering_100k.json").read_text())
    for name, curve in fx["recall_by_layer"].items():
        assert sum(curve) / len(curve) == pytest.approx(fx["mean_recall"][name])
    assert fx["floor"] == 1.25 * fx["chance"]
