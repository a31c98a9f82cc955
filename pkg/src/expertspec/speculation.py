"""Next-layer expert prediction and speculative execution.

Predictors look at what is known at layer ``l`` after gating and guess the
router decision of layer ``l + 1``:

* ``BaselineS``  feeds the current router input ``s_l`` to the next router.
* ``RouterPF``   feeds the quasi-hidden state ``RMSNorm_{l+1}(r_l + d_l)``,
  where ``d_l`` mixes per-expert default vectors with the current gates.
* ``EstPF``      runs the distilled estimator on the quasi-hidden state.
* ``HybridPF``   picks one of the above per layer.
* ``Oracle``     returns the decision the true forward pass will make.

Under speculative decode the predicted experts (and their gates) are what
layer ``l + 1`` executes; layer 0 always uses the true router.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorio
from .model import (
    DecodeHooks,
    DecodeState,
    LayerContext,
    LayerRecord,
    Model,
    RouterDecision,
    attention_step,
    decision_from_logits,
    forward_decode,
    moe_block,
    router,
)
from .numerics import F32, rms_norm

PREDICTOR_NAMES = ("baseline-s", "router-pf", "est-pf", "hybrid", "oracle")


class PredictorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# default vectors


class DefaultVectorTable:
    """Per-(layer, expert) mean of the expert's raw output over routed tokens."""

    def __init__(self, L: int, E: int, H: int):
        self.sums = np.zeros((L, E, H), dtype=np.float64)
        self.count = np.zeros((L, E), dtype=np.int64)
        self._d: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.sums.shape

    def update(self, layer: int, expert: int, output) -> None:
        self.sums[layer, expert] += np.asarray(output, dtype=np.float64)
        self.count[layer, expert] += 1
        self._d = None

    def update_batch(self, layers: np.ndarray, experts: np.ndarray, outputs: np.ndarray) -> None:
        """Scatter-add rows of ``outputs`` at (layers[i], experts[i])."""
        L, E, H = self.sums.shape
        flat = layers.astype(np.int64) * E + experts.astype(np.int64)
        sums = self.sums.reshape(L * E, H)
        for j in range(H):  # bincount per column beats np.add.at by a wide margin
            sums[:, j] += np.bincount(flat, weights=outputs[:, j], minlength=L * E)
        self.count += np.bincount(flat, minlength=L * E).reshape(L, E)
        self._d = None

    def record_sink(self, rec: LayerRecord) -> None:
        for e, out in zip(rec.executed.ids, rec.expert_out):
            self.update(rec.layer, e, out)

    @property
    def d(self) -> np.ndarray:
        if self._d is None:
            c = np.maximum(self.count, 1)[..., None]
            d = np.where(self.count[..., None] > 0, self.sums / c, 0.0)
            self._d = d.astype(F32)
        return self._d

    @classmethod
    def from_arrays(cls, d, count) -> "DefaultVectorTable":
        d = np.asarray(d, dtype=F32)
        count = np.asarray(count, dtype=np.int64)
        t = cls(*d.shape)
        t.count = count.copy()
        t.sums = d.astype(np.float64) * count[..., None]
        t._d = np.where(count[..., None] > 0, d, 0).astype(F32)
        return t

    @classmethod
    def zeros(cls, L: int, E: int, H: int) -> "DefaultVectorTable":
        return cls(L, E, H)

    def save(self, path) -> list[Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensorio.save(path, self.d)
        counts_path = path.with_name("counts.json")
        counts_path.write_text(json.dumps({"count": self.count.tolist()}) + "\n")
        return [path, counts_path]

    @classmethod
    def load(cls, path) -> "DefaultVectorTable":
        path = Path(path)
        d = tensorio.load(path)
        counts_path = path.with_name("counts.json")
        if counts_path.exists():
            count = np.asarray(json.loads(counts_path.read_text())["count"], dtype=np.int64)
        else:
            count = np.ones(d.shape[:2], dtype=np.int64)
        return cls.from_arrays(d, count)


def accumulate_default_vectors(trace, table: DefaultVectorTable | None = None, chunk: int = 4096) -> DefaultVectorTable:
    """Average each executed expert's raw output per layer over a trace bundle."""
    from .trace import TraceError

    c = trace.config
    if trace.expert_out.shape[:3] != trace.exec_ids.shape or trace.expert_out.shape[-1] != c.H:
        raise TraceError("malformed trace: expert_out does not match exec_ids")
    table = table or DefaultVectorTable(c.L, c.E, c.H)
    layer_idx = np.broadcast_to(np.arange(c.L)[None, :, None], (1, c.L, c.k))
    for start in range(0, trace.n_tokens, chunk):
        ids = trace.exec_ids[start : start + chunk]
        outs = trace.expert_out[start : start + chunk]
        layers = np.broadcast_to(layer_idx, ids.shape)
        table.update_batch(layers.ravel(), ids.ravel().astype(np.int64), outs.reshape(-1, c.H).astype(np.float64))
    return table


def layer_default(table: DefaultVectorTable, decision: RouterDecision, layer: int) -> np.ndarray:
    """d_l = sum over selected experts of gate * d[l][e]."""
    L, E, H = table.shape
    if not 0 <= layer < L:
        raise IndexError(f"layer {layer} out of range [0, {L})")
    d = table.d[layer]
    out = np.zeros(H, dtype=F32)
    for e, g in zip(decision.ids, decision.gates):
        if not 0 <= e < E:
            raise IndexError(f"expert {e} out of range [0, {E})")
        out = out + F32(g) * d[e]
    return out


def quasi_hidden(r, d, next_norm_gain, eps: float) -> np.ndarray:
    r = np.asarray(r, dtype=F32)
    d = np.asarray(d, dtype=F32)
    if r.shape != d.shape:
        raise ValueError(f"length mismatch: r {r.shape} vs d {d.shape}")
    return rms_norm(r + d, next_norm_gain, eps)


def quasi_hidden_batch(r: np.ndarray, ids: np.ndarray, gates: np.ndarray, table: DefaultVectorTable, layer: int, gain, eps: float) -> np.ndarray:
    """Vectorized quasi-hidden states for many tokens at one layer (float32)."""
    d = np.einsum("tk,tkh->th", gates.astype(F32), table.d[layer][ids.astype(np.int64)])
    x = r.astype(F32) + d.astype(F32)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + F32(eps)) * np.asarray(gain, dtype=F32)).astype(F32)


# ---------------------------------------------------------------------------
# predictors


@dataclass
class LayerBatch:
    """Recorded per-token state at one layer, for vectorized prediction."""

    layer: int
    s: np.ndarray  # (N, H)
    r: np.ndarray  # (N, H)
    ids: np.ndarray  # (N, k) true router decision at this layer
    gates: np.ndarray  # (N, k)
    next_ids: np.ndarray | None = None  # (N, k) true decision one layer down


def ranked_ids(logits: np.ndarray, k: int, gating: str = "softmax_topk") -> np.ndarray:
    """Row-wise counterpart of ``decision_from_logits`` returning only the ids."""
    logits = np.asarray(logits, dtype=F32)
    if gating == "softmax_topk":
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        keys = e / e.sum(axis=1, keepdims=True)
    else:
        keys = logits
    return np.argsort(-keys, axis=1, kind="stable")[:, :k]


class Predictor:
    name = "predictor"

    def predict(self, model: Model, ctx: LayerContext) -> tuple[np.ndarray, RouterDecision]:
        raise NotImplementedError

    def predict_batch(self, model: Model, batch: LayerBatch) -> np.ndarray:
        """Predicted next-layer expert ids for every row, best first."""
        raise NotImplementedError

    def _route_batch(self, model: Model, batch: LayerBatch, x: np.ndarray) -> np.ndarray:
        c = model.config
        return ranked_ids(x @ model.layers[batch.layer + 1].gate.T, c.k, c.gating)

    def _check(self, model: Model, ctx: LayerContext) -> None:
        if not 0 <= ctx.layer < model.config.L - 1:
            raise PredictorError(f"no next layer to predict from layer {ctx.layer}")


class BaselineS(Predictor):
    name = "baseline-s"

    def predict(self, model, ctx):
        self._check(model, ctx)
        c = model.config
        return router(ctx.s, model.layers[ctx.layer + 1].gate, c.k, c.gating)

    def predict_batch(self, model, batch):
        return self._route_batch(model, batch, batch.s)


@dataclass
class RouterPF(Predictor):
    table: DefaultVectorTable | None
    name = "router-pf"

    def quasi(self, model: Model, ctx: LayerContext) -> np.ndarray:
        if self.table is None:
            raise PredictorError("router-pf requires a default-vector table")
        d = layer_default(self.table, ctx.decision, ctx.layer)
        return quasi_hidden(ctx.r, d, model.layers[ctx.layer + 1].moe_norm, model.config.eps)

    def predict(self, model, ctx):
        self._check(model, ctx)
        c = model.config
        return router(self.quasi(model, ctx), model.layers[ctx.layer + 1].gate, c.k, c.gating)

    def quasi_batch(self, model: Model, batch: LayerBatch) -> np.ndarray:
        if self.table is None:
            raise PredictorError("router-pf requires a default-vector table")
        l = batch.layer
        return quasi_hidden_batch(batch.r, batch.ids, batch.gates, self.table, l, model.layers[l + 1].moe_norm, model.config.eps)

    def predict_batch(self, model, batch):
        return self._route_batch(model, batch, self.quasi_batch(model, batch))


@dataclass
class EstPF(Predictor):
    params: object | None  # estimator.EstimatorParams
    table: DefaultVectorTable | None
    name = "est-pf"

    def predict(self, model, ctx):
        from .estimator import estimator_forward

        self._check(model, ctx)
        if self.params is None:
            raise PredictorError("est-pf requires a trained estimator")
        q = RouterPF(self.table).quasi(model, ctx)
        logits = estimator_forward(self.params, q, ctx.layer).astype(F32)
        return logits, decision_from_logits(logits, model.config.k, model.config.gating)

    def predict_batch(self, model, batch):
        from .estimator import forward_batch

        if self.params is None:
            raise PredictorError("est-pf requires a trained estimator")
        q = RouterPF(self.table).quasi_batch(model, batch)
        logits = forward_batch(self.params, q, np.full(len(q), batch.layer)).astype(F32)
        return ranked_ids(logits, model.config.k, model.config.gating)


@dataclass
class HybridPF(Predictor):
    table: Mapping[int, Predictor]
    name = "hybrid"

    def predict(self, model, ctx):
        self._check(model, ctx)
        missing = [l for l in range(model.config.L - 1) if l not in self.table]
        if missing:
            raise PredictorError(f"hybrid map does not cover layers {missing}")
        return self.table[ctx.layer].predict(model, ctx)

    def predict_batch(self, model, batch):
        if batch.layer not in self.table:
            raise PredictorError(f"hybrid map does not cover layer {batch.layer}")
        return self.table[batch.layer].predict_batch(model, batch)


class Oracle(Predictor):
    """Returns the true next-layer decision.

    On a recorded trace the answer is read from the trace. During decode it
    runs the next layer's attention and router on a non-committing view of
    the live state, using the exact same kernels as the real forward pass.
    """

    name = "oracle"

    def predict(self, model, ctx):
        self._check(model, ctx)
        if ctx.true_next is not None:
            return None, ctx.true_next
        if ctx.state is None or ctx.executed is None:
            raise PredictorError("oracle needs the live decode state")
        c = model.config
        nxt = model.layers[ctx.layer + 1]
        m = moe_block(ctx.s, ctx.executed, model.layers[ctx.layer].experts)
        h = ctx.r + m
        r1 = h + attention_step(rms_norm(h, nxt.attn_norm, c.eps), ctx.state, ctx.layer + 1, nxt, ctx.position, commit=False)
        return router(rms_norm(r1, nxt.moe_norm, c.eps), nxt.gate, c.k, c.gating)

    def predict_batch(self, model, batch):
        if batch.next_ids is None:
            raise PredictorError("oracle batch prediction needs recorded next-layer ids")
        return np.asarray(batch.next_ids)


def make_predictor(
    name: str,
    table: DefaultVectorTable | None = None,
    estimator=None,
    hybrid_map: Mapping[int, str] | None = None,
) -> Predictor:
    if name == "baseline-s":
        return BaselineS()
    if name == "router-pf":
        if table is None:
            raise PredictorError("router-pf requires default vectors")
        return RouterPF(table)
    if name == "est-pf":
        if estimator is None:
            raise PredictorError("est-pf requires an estimator checkpoint")
        if table is None:
            raise PredictorError("est-pf requires default vectors")
        return EstPF(estimator, table)
    if name == "oracle":
        return Oracle()
    if name == "hybrid":
        if hybrid_map is None:
            raise PredictorError("hybrid requires a layer -> predictor map")
        if any(v == "hybrid" for v in hybrid_map.values()):
            raise PredictorError("hybrid map entries cannot be 'hybrid'")
        return HybridPF({int(l): make_predictor(v, table, estimator) for l, v in hybrid_map.items()})
    raise PredictorError(f"unknown predictor {name!r}; choose from {PREDICTOR_NAMES}")


def load_hybrid_map(path) -> dict[int, str]:
    raw = json.loads(Path(path).read_text())
    return {int(k): str(v) for k, v in raw.items()}


def predict_next(predictor: Predictor, model: Model, ctx: LayerContext) -> tuple[np.ndarray | None, RouterDecision]:
    return predictor.predict(model, ctx)


# ---------------------------------------------------------------------------
# speculative decode


@dataclass
class SpeculativeHooks(DecodeHooks):
    """Executes the decision predicted at the previous layer; layer 0 routes normally."""

    predictor: Predictor
    pending: RouterDecision | None = None
    predictions: list = field(default_factory=list)  # (layer, predicted decision) per step

    def decide(self, model, ctx):
        if ctx.layer == 0:
            self.predictions = []
            return ctx.decision
        if self.pending is None:
            raise PredictorError(f"no prediction available for layer {ctx.layer}")
        return self.pending

    def after_decide(self, model, ctx):
        self.pending = None
        if ctx.layer < model.config.L - 1:
            _, self.pending = self.predictor.predict(model, ctx)
            self.predictions.append((ctx.layer + 1, self.pending))


def speculative_forward(model: Model, state: DecodeState, token: int, predictor: Predictor, sink=None) -> np.ndarray:
    return forward_decode(model, state, token, sink=sink, hooks=SpeculativeHooks(predictor))


def speculative_kl(model: Model, prompt, n_tokens: int, predictor: Predictor) -> np.ndarray:
    """Per-step KL(true next-token distribution || speculative one).

    Both paths are teacher-forced with the true path's greedy tokens so the
    comparison is step-aligned; the prompt is prefilled with true routing.
    """
    from .numerics import softmax64

    if len(prompt) == 0:
        raise ValueError("empty prompt")
    true_state, spec_state = DecodeState.empty(model.config), DecodeState.empty(model.config)
    for tok in prompt:
        logits = forward_decode(model, true_state, int(tok))
        forward_decode(model, spec_state, int(tok))
    hooks = SpeculativeHooks(predictor)
    out = np.empty(n_tokens)
    for i in range(n_tokens):
        nxt = int(np.argmax(logits))
        logits = forward_decode(model, true_state, nxt)
        spec = forward_decode(model, spec_state, nxt, hooks=hooks)
        p, q = softmax64(logits), softmax64(spec)
        out[i] = float(np.sum(p * (np.log(p) - np.log(q))))
    return out
