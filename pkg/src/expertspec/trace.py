"""Decode traces: per-(token, layer) records of every routing signal.

A trace bundle is a directory holding ``manifest.json`` and one MOET file
per field. Field shapes use T tokens, L layers::

    tokens        [T]
    s, r, m       [T, L, H]     router input, post-attention residual, MoE output
    router_logits [T, L, E]
    ids, gates    [T, L, k]     true router decision (ids stored as f32)
    expert_out    [T, L, k, H]  raw outputs of the executed experts
    exec_ids, exec_gates [T, L, k]   executed decision (differs under speculation)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensorio
from .model import DecodeHooks, DecodeState, LayerRecord, Model, ModelConfig, RouterDecision, forward_decode
from .numerics import F32, Rng

FIELDS = ("tokens", "s", "r", "m", "router_logits", "ids", "gates", "expert_out", "exec_ids", "exec_gates")


class TraceError(ValueError):
    pass


@dataclass
class Trace:
    config: ModelConfig
    tokens: np.ndarray
    s: np.ndarray
    r: np.ndarray
    m: np.ndarray
    router_logits: np.ndarray
    ids: np.ndarray
    gates: np.ndarray
    expert_out: np.ndarray
    exec_ids: np.ndarray
    exec_gates: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    def decision(self, t: int, l: int) -> RouterDecision:
        return RouterDecision(tuple(int(i) for i in self.ids[t, l]), tuple(float(g) for g in self.gates[t, l]))

    def executed(self, t: int, l: int) -> RouterDecision:
        return RouterDecision(
            tuple(int(i) for i in self.exec_ids[t, l]), tuple(float(g) for g in self.exec_gates[t, l])
        )

    def slice(self, start: int, stop: int) -> "Trace":
        return Trace(self.config, *(getattr(self, f)[start:stop] for f in FIELDS))

    def validate(self) -> "Trace":
        c = self.config
        T = self.n_tokens
        want = {
            "s": (T, c.L, c.H),
            "r": (T, c.L, c.H),
            "m": (T, c.L, c.H),
            "router_logits": (T, c.L, c.E),
            "ids": (T, c.L, c.k),
            "gates": (T, c.L, c.k),
            "expert_out": (T, c.L, c.k, c.H),
            "exec_ids": (T, c.L, c.k),
            "exec_gates": (T, c.L, c.k),
        }
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise TraceError(f"malformed trace: field {name} has shape {got}, expected {shape}")
        if T and (self.ids.min() < 0 or self.ids.max() >= c.E):
            raise TraceError("malformed trace: expert id out of range")
        return self


class TraceRecorder:
    """Sink for ``forward_decode`` that fills preallocated trace arrays."""

    def __init__(self, config: ModelConfig, n_tokens: int):
        c = config
        self.config = c
        self.capacity = n_tokens
        self.tokens = np.zeros(n_tokens, dtype=F32)
        self.s = np.zeros((n_tokens, c.L, c.H), dtype=F32)
        self.r = np.zeros_like(self.s)
        self.m = np.zeros_like(self.s)
        self.router_logits = np.zeros((n_tokens, c.L, c.E), dtype=F32)
        self.ids = np.zeros((n_tokens, c.L, c.k), dtype=F32)
        self.gates = np.zeros((n_tokens, c.L, c.k), dtype=F32)
        self.expert_out = np.zeros((n_tokens, c.L, c.k, c.H), dtype=F32)
        self.exec_ids = np.zeros_like(self.ids)
        self.exec_gates = np.zeros_like(self.gates)
        self.count = 0
        self.offset = 0

    def set_token(self, t: int, token: int) -> None:
        self.offset = t
        self.tokens[t] = token
        self.count = max(self.count, t + 1)

    def __call__(self, rec: LayerRecord) -> None:
        t, l = self.offset, rec.layer
        self.s[t, l] = rec.s
        self.r[t, l] = rec.r
        self.m[t, l] = rec.m
        self.router_logits[t, l] = rec.logits
        self.ids[t, l] = rec.decision.ids
        self.gates[t, l] = rec.decision.gates
        self.exec_ids[t, l] = rec.executed.ids
        self.exec_gates[t, l] = rec.executed.gates
        self.expert_out[t, l] = rec.expert_out

    def finish(self) -> Trace:
        n = self.count
        return Trace(self.config, *(getattr(self, f)[:n] for f in FIELDS)).validate()


def windows(tokens: Sequence[int], context: int) -> Iterator[tuple[int, Sequence[int]]]:
    """Split a token stream into independent windows of at most ``context`` tokens."""
    for start in range(0, len(tokens), context):
        yield start, tokens[start : start + context]


def run_windows(model: Model, tokens: Sequence[int], context: int, sink, hooks: DecodeHooks | None = None, on_token=None) -> None:
    """Teacher-force ``tokens`` in fresh-state windows, streaming records to ``sink``."""
    if context < 1:
        raise TraceError(f"context must be >= 1, got {context}")
    for start, chunk in windows(tokens, context):
        state = DecodeState.empty(model.config)
        if hasattr(hooks, "reset"):
            hooks.reset()
        for i, tok in enumerate(chunk):
            if on_token is not None:
                on_token(start + i, int(tok))
            forward_decode(model, state, int(tok), sink=sink, hooks=hooks, token_index=start + i)


def record_trace(model: Model, tokens: Sequence[int], context: int = 128, hooks: DecodeHooks | None = None) -> Trace:
    if len(tokens) == 0:
        raise TraceError("empty workload")
    rec = TraceRecorder(model.config, len(tokens))
    run_windows(model, tokens, context, rec, hooks=hooks, on_token=rec.set_token)
    return rec.finish()


def random_tokens(vocab: int, n: int, seed: int) -> np.ndarray:
    return Rng(seed).integers(vocab, n)


def corpus_tokens(path) -> np.ndarray:
    """Byte-level tokenization: one token per byte."""
    data = Path(path).read_bytes()
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def save_trace(trace: Trace, out_dir, extra: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in FIELDS:
        p = out / f"{f}.moet"
        tensorio.save(p, getattr(trace, f))
        written.append(p)
    manifest = {
        "config": trace.config.to_dict(),
        "n_tokens": trace.n_tokens,
        "fields": list(FIELDS),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(out / "manifest.json")
    return written


def load_trace(bundle_dir) -> Trace:
    d = Path(bundle_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise TraceError(f"no manifest.json in {d}") from None
    config = ModelConfig.from_dict(manifest["config"])
    missing = [f for f in FIELDS if not (d / f"{f}.moet").exists()]
    if missing:
        raise TraceError(f"malformed trace: missing fields {missing}")
    arrays = [tensorio.load(d / f"{f}.moet") for f in FIELDS]
    return Trace(config, *arrays).validate()


def iter_records(trace: Trace) -> Iterable[tuple[int, int]]:
    for t in range(trace.n_tokens):
        for l in range(trace.config.L):
            yield t, l
