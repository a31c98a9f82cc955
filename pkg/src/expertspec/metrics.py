"""Evaluation statistics: recall@k, rank alignment, drift, per-layer aggregation."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import LayerContext, LayerRecord, Model, RouterDecision
from .numerics import cosine_similarity, rms_norm


def recall_at_k(pred: RouterDecision, truth: RouterDecision) -> float:
    if pred.k != truth.k:
        raise ValueError(f"k mismatch: {pred.k} vs {truth.k}")
    return len(set(pred.ids) & set(truth.ids)) / truth.k


def rank_alignment(pred: RouterDecision, truth: RouterDecision) -> list[bool]:
    """match[r] is True when both decisions put the same expert at rank r."""
    if pred.k != truth.k:
        raise ValueError(f"k mismatch: {pred.k} vs {truth.k}")
    return [a == b for a, b in zip(pred.ids, truth.ids)]


class RunningMean:
    """Welford mean in float64; mergeable for partial aggregation."""

    __slots__ = ("n", "mean")

    def __init__(self) -> None:
        self.n = 0
        self.mean = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        self.mean += (float(x) - self.mean) / self.n

    def merge(self, other: "RunningMean") -> "RunningMean":
        n = self.n + other.n
        if n:
            self.mean += (other.mean - self.mean) * other.n / n
        self.n = n
        return self


@dataclass
class LayerReport:
    layer: int
    metrics: dict[str, RunningMean] = field(default_factory=lambda: defaultdict(RunningMean))

    def mean(self, name: str) -> float:
        return self.metrics[name].mean

    def count(self, name: str) -> int:
        return self.metrics[name].n


def aggregate(records: Iterable[tuple[int, str, float]]) -> list[LayerReport]:
    """Fold ``(layer, metric, value)`` records into per-layer running means, sorted by layer."""
    reports: dict[int, LayerReport] = {}
    for layer, name, value in records:
        rep = reports.get(layer)
        if rep is None:
            rep = reports[layer] = LayerReport(layer)
        rep.metrics[name].add(value)
    return [reports[l] for l in sorted(reports)]


def fmt(x: float) -> str:
    return f"{x:.6g}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Write a CSV with 6-significant-digit floats; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# predictor evaluation over record streams


@dataclass
class PredictorEvaluation:
    """Per-layer statistics for a set of predictors.

    Layer indices refer to the layer the prediction is made *from*; the
    target is the next layer's true router decision.
    """

    names: list[str]
    k: int
    recall: dict[str, dict[int, RunningMean]] = field(default_factory=dict)
    ranks: dict[str, dict[int, list[RunningMean]]] = field(default_factory=dict)
    cos_quasi: dict[int, RunningMean] = field(default_factory=lambda: defaultdict(RunningMean))
    cos_baseline: dict[int, RunningMean] = field(default_factory=lambda: defaultdict(RunningMean))

    def __post_init__(self):
        for n in self.names:
            self.recall.setdefault(n, defaultdict(RunningMean))
            self.ranks.setdefault(n, defaultdict(lambda: [RunningMean() for _ in range(self.k)]))

    def layers(self) -> list[int]:
        ls = set()
        for d in self.recall.values():
            ls.update(d)
        ls.update(self.cos_quasi)
        return sorted(ls)

    def mean_recall(self, name: str) -> float:
        vals = [m.mean for _, m in sorted(self.recall[name].items())]
        return float(np.mean(vals)) if vals else float("nan")

    def recall_curve(self, name: str) -> list[float]:
        return [self.recall[name][l].mean for l in sorted(self.recall[name])]

    def hit_rate_rows(self, name: str):
        for l in sorted(self.recall[name]):
            yield (l, name, self.recall[name][l].mean)

    def comparison_rows(self):
        """Wide table: one row per layer, one recall column per predictor."""
        for l in self.layers():
            yield (l, *(self.recall[n][l].mean if l in self.recall[n] else float("nan") for n in self.names))

    def rank_rows(self, name: str):
        for l in sorted(self.ranks[name]):
            for r, m in enumerate(self.ranks[name][l], start=1):
                yield (l, r, m.mean)

    def drift_rows(self):
        for l in sorted(self.cos_baseline):
            yield (l, self.cos_quasi[l].mean if l in self.cos_quasi else float("nan"), self.cos_baseline[l].mean)


class PredictorEvaluator:
    """Record sink that scores predictors against the next layer's true decision.

    Feed it layer records in (token, layer) order, either live from
    ``forward_decode`` or replayed from a trace. The evaluator keeps the
    previous layer's record and, on seeing layer ``l + 1``, asks every
    predictor what it would have predicted at layer ``l``.
    """

    def __init__(self, model: Model, predictors: Mapping[str, object], table=None, drift: bool = True):
        self.model = model
        self.predictors = dict(predictors)
        self.table = table
        self.drift = drift
        self.result = PredictorEvaluation(list(self.predictors), model.config.k)
        self._prev: LayerRecord | None = None

    def __call__(self, rec: LayerRecord) -> None:
        prev, self._prev = self._prev, rec
        if rec.layer == 0 or prev is None or prev.layer != rec.layer - 1:
            return
        l = prev.layer
        ctx = LayerContext(l, prev.r, prev.s, prev.logits, prev.decision, executed=prev.executed, true_next=rec.decision)
        res = self.result
        for name, p in self.predictors.items():
            _, pred = p.predict(self.model, ctx)
            res.recall[name][l].add(recall_at_k(pred, rec.decision))
            for r, hit in enumerate(rank_alignment(pred, rec.decision)):
                res.ranks[name][l][r].add(float(hit))
        if self.drift:
            res.cos_baseline[l].add(cosine_similarity(prev.s, rec.s))
            if self.table is not None:
                from .speculation import RouterPF

                res.cos_quasi[l].add(cosine_similarity(RouterPF(self.table).quasi(self.model, ctx), rec.s))


def replay_records(trace, start: int = 0, stop: int | None = None) -> Iterable[LayerRecord]:
    """Rebuild layer records from a trace bundle."""
    stop = trace.n_tokens if stop is None else stop
    for t in range(start, stop):
        for l in range(trace.config.L):
            yield LayerRecord(
                t,
                l,
                trace.s[t, l],
                trace.r[t, l],
                trace.router_logits[t, l],
                trace.decision(t, l),
                trace.executed(t, l),
                trace.expert_out[t, l],
                trace.m[t, l],
            )


def evaluate_trace(model: Model, trace, predictors: Mapping[str, object], table=None, drift: bool = True) -> PredictorEvaluation:
    ev = PredictorEvaluator(model, predictors, table, drift)
    for rec in replay_records(trace):
        ev(rec)
    return ev.result


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity of a zero vector")
    return np.clip(np.einsum("nh,nh->n", a, b) / (na * nb), -1.0, 1.0)


def _mean_of(values: np.ndarray) -> RunningMean:
    m = RunningMean()
    m.n = int(values.size)
    m.mean = float(values.mean()) if values.size else 0.0
    return m


def evaluate_trace_batched(model: Model, trace, predictors: Mapping[str, object], table=None, drift: bool = True, chunk: int = 8192) -> PredictorEvaluation:
    """Vectorized ``evaluate_trace``: one matrix product per layer and predictor.

    Agrees with the record-by-record path except where two router
    probabilities differ only in the last float32 bit.
    """
    from .speculation import LayerBatch, RouterPF

    c = trace.config
    res = PredictorEvaluation(list(predictors), c.k)
    n = trace.n_tokens
    hits = {name: [[] for _ in range(c.L - 1)] for name in predictors}
    rank_hits = {name: [[] for _ in range(c.L - 1)] for name in predictors}
    cq = [[] for _ in range(c.L - 1)]
    cb = [[] for _ in range(c.L - 1)]
    quasi = RouterPF(table) if table is not None else None
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        for l in range(c.L - 1):
            truth = trace.ids[sl, l + 1].astype(np.int64)
            batch = LayerBatch(l, trace.s[sl, l], trace.r[sl, l], trace.ids[sl, l].astype(np.int64), trace.gates[sl, l], truth)
            for name, p in predictors.items():
                pred = np.asarray(p.predict_batch(model, batch), dtype=np.int64)
                hits[name][l].append((pred[:, :, None] == truth[:, None, :]).any(axis=2).sum(axis=1) / c.k)
                rank_hits[name][l].append(pred == truth)
            if drift:
                cb[l].append(_cos_rows(trace.s[sl, l], trace.s[sl, l + 1]))
                if quasi is not None:
                    cq[l].append(_cos_rows(quasi.quasi_batch(model, batch), trace.s[sl, l + 1]))
    for name in predictors:
        for l in range(c.L - 1):
            res.recall[name][l] = _mean_of(np.concatenate(hits[name][l]))
            ranks = np.concatenate(rank_hits[name][l]).astype(np.float64)
            res.ranks[name][l] = [_mean_of(ranks[:, r]) for r in range(c.k)]
    if drift:
        for l in range(c.L - 1):
            res.cos_baseline[l] = _mean_of(np.concatenate(cb[l]))
            if quasi is not None:
                res.cos_quasi[l] = _mean_of(np.concatenate(cq[l]))
    return res


def drift_report(model: Model, trace, table) -> tuple[list[float], list[float]]:
    """Per-layer mean cosine(q_l, s_{l+1}) and cosine(s_l, s_{l+1}) for l in 0..L-2."""
    if trace.n_tokens == 0:
        raise ValueError("empty trace")
    if trace.config.L < 2:
        raise ValueError("drift needs at least two layers")
    res = evaluate_trace_batched(model, trace, {}, table, drift=True)
    return [m.mean for _, m in sorted(res.cos_quasi.items())], [m.mean for _, m in sorted(res.cos_baseline.items())]


def write_eval_csvs(res: PredictorEvaluation, out_dir, predictor: str | None = None) -> dict[str, str]:
    """drift.csv, plus hit_rate.csv and rank_align.csv for one predictor."""
    out = Path(out_dir)
    texts = {"drift.csv": write_csv(out / "drift.csv", ("layer", "cos_quasi", "cos_baseline"), res.drift_rows())}
    name = predictor or (res.names[0] if res.names else None)
    if name is not None:
        texts["hit_rate.csv"] = write_csv(out / "hit_rate.csv", ("layer", "predictor", "recall_at_k"), res.hit_rate_rows(name))
        texts["rank_align.csv"] = write_csv(out / "rank_align.csv", ("layer", "rank", "match_rate"), res.rank_rows(name))
    return texts


def write_comparison_csv(res: PredictorEvaluation, path) -> str:
    return write_csv(path, ("layer", *res.names), res.comparison_rows())


def rms_normed_residual(model: Model, r, layer: int) -> np.ndarray:
    """rms_norm(r_l) with the next layer's router-input gain (the d_l = 0 quasi state)."""
    return rms_norm(r, model.layers[layer + 1].moe_norm, model.config.eps)
