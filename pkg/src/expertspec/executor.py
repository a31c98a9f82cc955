"""Real two-lane offloaded decode: a compute thread and a serialized copy thread.

Expert weights live in a host-side pool. The device side is an
``ExpertBufferPool`` of two buffers, each holding k expert weight sets. A
copy worker services a FIFO of copy requests: it waits until the target
buffer has been released, sleeps for the injected transfer latency, copies
the weights in, and marks the buffer ready for that layer. The compute
thread reads experts only from a ready buffer and releases it afterwards.
"""

from __future__ import annotations

import queue
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DecodeState, ExpertWeights, Model, RouterDecision, forward_decode
from .schedule import COMPUTE, COPY, ScheduleEvent
from .speculation import Predictor, SpeculativeHooks

MODES = ("on_demand", "prefetch")


class DeadlockError(RuntimeError):
    pass


class BufferInvariantError(RuntimeError):
    pass


class _Buffer:
    def __init__(self, index: int, k: int, H: int, H_moe: int):
        self.index = index
        self.w_in = np.zeros((k, 2 * H_moe, H), dtype=np.float32)
        self.w_down = np.zeros((k, H, H_moe), dtype=np.float32)
        self.layer: int | None = None
        self.token: int | None = None
        self.ids: tuple[int, ...] = ()
        self.ready = threading.Event()
        self.free = threading.Event()
        self.free.set()

    def experts(self) -> dict[int, ExpertWeights]:
        out = {}
        for slot, e in enumerate(self.ids):
            ew = ExpertWeights.__new__(ExpertWeights)
            n = self.w_down.shape[2]
            ew.w_in = self.w_in[slot]
            ew.w_gate, ew.w_up = ew.w_in[:n], ew.w_in[n:]
            ew.w_down = self.w_down[slot]
            out[e] = ew
        return out


@dataclass
class _CopyRequest:
    token: int
    layer: int
    ids: tuple[int, ...]
    buffer: _Buffer
    blocking: bool = False
    copy_start: float | None = None


class ExpertBufferPool:
    """Two device-side buffers alternating across copy requests."""

    def __init__(self, model: Model):
        c = model.config
        self.buffers = [_Buffer(i, c.k, c.H, c.H_moe) for i in range(2)]
        self._next = 0
        self.resident_peak = 0
        self._lock = threading.Lock()

    def claim(self) -> _Buffer:
        b = self.buffers[self._next]
        self._next ^= 1
        return b

    def resident(self) -> int:
        return sum(1 for b in self.buffers if not b.free.is_set())


class CopyEngine(threading.Thread):
    """Single worker, so copies are serialized in submission order."""

    def __init__(self, model: Model, latency_s: float, clock, events: list, timeout: float):
        super().__init__(daemon=True, name="copy-lane")
        self.model = model
        self.latency_s = latency_s
        self.clock = clock
        self.events = events
        self.timeout = timeout
        self.requests: queue.Queue[_CopyRequest | None] = queue.Queue()
        self.error: BaseException | None = None

    def submit(self, req: _CopyRequest) -> None:
        req.buffer.ready.clear()
        self.requests.put(req)

    def stop(self) -> None:
        self.requests.put(None)

    def run(self) -> None:
        try:
            while True:
                req = self.requests.get()
                if req is None:
                    return
                buf = req.buffer
                if not buf.free.wait(self.timeout):
                    raise DeadlockError(f"copy lane waited > {self.timeout:.3f}s for buffer {buf.index} to be released")
                buf.free.clear()
                start = req.copy_start = self.clock()
                if self.latency_s > 0:
                    time.sleep(self.latency_s)
                experts = self.model.layers[req.layer].experts
                for slot, e in enumerate(req.ids):
                    np.copyto(buf.w_in[slot], experts[e].w_in)
                    np.copyto(buf.w_down[slot], experts[e].w_down)
                buf.layer, buf.token, buf.ids = req.layer, req.token, req.ids
                end = self.clock()
                self.events.append(ScheduleEvent(COPY, "copy", req.layer, start, end, blocking=req.blocking))
                buf.ready.set()
        except BaseException as exc:  # surfaced to the compute thread
            self.error = exc


class OffloadHooks(SpeculativeHooks):
    """Speculative decode whose expert weights come through the copy lane."""

    def __init__(self, predictor: Predictor | None, pool: ExpertBufferPool, engine: CopyEngine, mode: str, clock, events: list, timeout: float):
        super().__init__(predictor)
        self.pool, self.engine, self.mode = pool, engine, mode
        self.clock, self.events, self.timeout = clock, events, timeout
        self.token = 0
        self.inflight: dict[int, _CopyRequest] = {}
        self._t: dict[str, float] = {}
        self.residency: list[tuple[float, float]] = []

    def _issue(self, layer: int, decision: RouterDecision, blocking: bool) -> None:
        req = _CopyRequest(self.token, layer, decision.ids, self.pool.claim(), blocking)
        self.inflight[layer] = req
        self.engine.submit(req)

    def _wait(self, layer: int) -> _Buffer:
        req = self.inflight[layer]
        t0 = time.monotonic()
        while not req.buffer.ready.wait(0.01):
            if self.engine.error is not None:
                raise self.engine.error
            if time.monotonic() - t0 > self.timeout:
                raise DeadlockError(
                    f"compute lane waited > {self.timeout:.3f}s for layer {layer} experts "
                    f"(token {self.token}, buffer {req.buffer.index})"
                )
        return req.buffer

    def mark(self, layer, phase):
        now = self.clock()
        if phase == "start":
            self._t["start"] = now
        elif phase == "attn":
            self.events.append(ScheduleEvent(COMPUTE, "attn", layer, self._t["start"], now))
            self._t["attn"] = now
        elif phase == "gate":
            self.events.append(ScheduleEvent(COMPUTE, "gate", layer, self._t["attn"], now))
            self._t["gate"] = now
        elif phase == "expert":
            self.events.append(ScheduleEvent(COMPUTE, "expert", layer, self._t["expert_start"], now))

    def decide(self, model, ctx):
        if self.predictor is None:
            if ctx.layer == 0:
                self.predictions = []
            return ctx.decision
        return super().decide(model, ctx)

    def after_decide(self, model, ctx):
        l, L = ctx.layer, model.config.L
        if self.mode == "on_demand" or l == 0:
            self._issue(l, ctx.executed, blocking=True)
        if self.predictor is not None:
            super().after_decide(model, ctx)
        if self.mode == "prefetch":
            if self.predictor is None:
                raise ValueError("prefetch mode needs a predictor")
            if l + 1 < L:
                self._issue(l + 1, self.pending, blocking=False)

    def expert_weights(self, model, layer, decision):
        buf = self._wait(layer)
        self._t["expert_start"] = self.clock()
        if buf.layer != layer or buf.token != self.token or tuple(buf.ids) != tuple(decision.ids):
            raise BufferInvariantError(
                f"read-before-ready: buffer {buf.index} holds layer {buf.layer} token {buf.token} "
                f"ids {buf.ids}, need layer {layer} token {self.token} ids {decision.ids}"
            )
        return buf.experts()

    def layer_done(self, layer):
        req = self.inflight.pop(layer)
        now = self.clock()
        req.buffer.ready.clear()
        req.buffer.free.set()
        self.residency.append((req.copy_start, now))


@dataclass
class TokenTiming:
    token: int
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class OffloadRun:
    mode: str
    tokens: list[int]
    events: list[ScheduleEvent]
    per_token: list[TokenTiming]
    residency: list[tuple[float, float]] = field(default_factory=list)

    @property
    def mean_tpot_us(self) -> float:
        return float(np.mean([t.duration for t in self.per_token])) if self.per_token else 0.0

    def token_events(self, i: int) -> list[ScheduleEvent]:
        """Events of decode step ``i``, with times relative to its start."""
        tt = self.per_token[i]
        out = []
        for e in self.events:
            if tt.start <= e.start and e.end <= tt.end + 1e-9:
                out.append(ScheduleEvent(e.lane, e.kind, e.layer, e.start - tt.start, e.end - tt.start, e.blocking))
        return out

    def timeline(self) -> list[dict]:
        return [e.to_json() for e in sorted(self.events, key=lambda e: (e.start, e.lane))]

    def compute_per_layer_us(self) -> np.ndarray:
        """Mean measured compute (attn + gate + expert) per layer."""
        by_layer: dict[int, list[float]] = {}
        for e in self.events:
            if e.lane == COMPUTE and e.kind in ("attn", "gate", "expert"):
                by_layer.setdefault(e.layer, []).append(e.end - e.start)
        n = max(len(self.per_token), 1)
        return np.array([sum(by_layer[l]) / n for l in sorted(by_layer)])

    def copy_per_layer_us(self) -> np.ndarray:
        by_layer: dict[int, list[float]] = {}
        for e in self.events:
            if e.lane == COPY:
                by_layer.setdefault(e.layer, []).append(e.end - e.start)
        return np.array([np.mean(by_layer[l]) for l in sorted(by_layer)])


def run_offloaded_decode(
    model: Model,
    prompt: Sequence[int],
    n_new: int,
    predictor: Predictor | None,
    latency_us: float,
    mode: str = "prefetch",
    switch_interval: float | None = 1e-4,
) -> OffloadRun:
    """Greedy decode with experts streamed through the copy lane.

    The prompt is prefilled with every expert resident (no copies). Each
    decode step then routes layer 0 with the true router and later layers
    with ``predictor``. Times in the returned events are microseconds since
    the run started.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    t_origin = time.perf_counter()
    clock = lambda: (time.perf_counter() - t_origin) * 1e6  # noqa: E731
    latency_s = latency_us * 1e-6
    timeout = max(100 * latency_s, 1.0)
    events: list[ScheduleEvent] = []
    pool = ExpertBufferPool(model)
    engine = CopyEngine(model, latency_s, clock, events, timeout)
    hooks = OffloadHooks(predictor, pool, engine, mode, clock, events, timeout)

    old_switch = sys.getswitchinterval()
    if switch_interval is not None:
        sys.setswitchinterval(switch_interval)
    engine.start()
    try:
        state = DecodeState.empty(model.config)
        logits = None
        for tok in prompt:
            logits = forward_decode(model, state, int(tok))
        tokens: list[int] = []
        per_token: list[TokenTiming] = []
        for i in range(n_new):
            nxt = int(np.argmax(logits))
            tokens.append(nxt)
            hooks.token = i
            t0 = clock()
            logits = forward_decode(model, state, nxt, hooks=hooks, token_index=i)
            per_token.append(TokenTiming(i, t0, clock()))
        if engine.error is not None:
            raise engine.error
    finally:
        engine.stop()
        engine.join(timeout=timeout)
        sys.setswitchinterval(old_switch)
    return OffloadRun(mode, tokens, list(events), per_token, hooks.residency)
