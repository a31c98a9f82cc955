"""Discrete-event model of per-token decode time with offloaded experts.

Two lanes: a serial compute lane (attention, gating, expert FFN per layer)
and a FIFO copy lane (host-to-device expert transfers). On-demand loading
blocks the compute lane on every copy; prefetching issues layer ``l + 1``'s
copy as soon as layer ``l`` has gated and its own copy has landed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

COMPUTE, COPY = "compute", "copy"
DEFAULT_BANDWIDTH = 25e9  # bytes / s, PCIe 4.0 class


class TimingError(ValueError):
    pass


@dataclass
class TimingModel:
    """Per-layer durations in time units (microseconds by convention)."""

    t_attn: np.ndarray
    t_gate: np.ndarray
    t_expert: np.ndarray
    t_copy: np.ndarray
    cold_start_copy: float | None = None
    name: str = "custom"

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, f), dtype=np.float64)) for f in ("t_attn", "t_gate", "t_expert", "t_copy")]
        L = max(len(a) for a in arrs)
        arrs = [np.broadcast_to(a, (L,)).copy() if len(a) == 1 else a for a in arrs]
        if any(len(a) != L for a in arrs):
            raise TimingError("per-layer duration arrays differ in length")
        self.t_attn, self.t_gate, self.t_expert, self.t_copy = arrs
        if self.cold_start_copy is None:
            self.cold_start_copy = float(self.t_copy[0])
        if any((a < 0).any() or not np.isfinite(a).all() for a in arrs) or not self.cold_start_copy >= 0:
            raise TimingError("durations must be finite and non-negative")

    @property
    def L(self) -> int:
        return len(self.t_attn)

    @property
    def t_compute(self) -> np.ndarray:
        return self.t_attn + self.t_gate + self.t_expert

    @classmethod
    def uniform(cls, L: int, attn: float, gate: float, expert: float, copy: float, **kw) -> "TimingModel":
        return cls(np.full(L, attn), np.full(L, gate), np.full(L, expert), np.full(L, copy), **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "L": self.L,
            "t_attn": self.t_attn.tolist(),
            "t_gate": self.t_gate.tolist(),
            "t_expert": self.t_expert.tolist(),
            "t_copy": self.t_copy.tolist(),
            "cold_start_copy": self.cold_start_copy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimingModel":
        L = d.get("L")
        vals = {}
        for f in ("t_attn", "t_gate", "t_expert", "t_copy"):
            v = d[f]
            if np.isscalar(v):
                if L is None:
                    raise TimingError(f"scalar {f} needs an explicit L")
                v = [v] * L
            vals[f] = np.asarray(v, dtype=np.float64)
        return cls(**vals, cold_start_copy=d.get("cold_start_copy"), name=d.get("name", "custom"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TimingModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ScheduleEvent:
    lane: str
    kind: str
    layer: int
    start: float
    end: float
    blocking: bool = False  # copy the compute lane waits on synchronously

    def to_json(self) -> dict:
        return {"lane": self.lane, "kind": self.kind, "layer": self.layer, "start_us": self.start, "end_us": self.end}


@dataclass
class Breakdown:
    compute: float
    copy: float
    idle: float

    @property
    def total(self) -> float:
        return self.compute + self.copy + self.idle

    def fractions(self) -> dict[str, float]:
        t = self.total
        if t == 0:
            return {"compute_frac": 0.0, "copy_frac": 0.0, "idle_frac": 0.0}
        return {"compute_frac": float(self.compute / t), "copy_frac": float(self.copy / t), "idle_frac": float(self.idle / t)}


@dataclass
class ScheduleReport:
    mode: str
    events: list[ScheduleEvent]
    tpot: float
    breakdown: Breakdown = field(init=False)

    def __post_init__(self):
        self.breakdown = compute_breakdown(self.events, self.tpot)

    def lane(self, lane: str) -> list[ScheduleEvent]:
        return sorted((e for e in self.events if e.lane == lane), key=lambda e: (e.start, e.end))


def _union_length(intervals: Sequence[tuple[float, float]]) -> float:
    total, cur_s, cur_e = 0.0, None, None
    for s, e in sorted(intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def _overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def compute_breakdown(events: Sequence[ScheduleEvent], tpot: float) -> Breakdown:
    """Attribute [0, tpot] of the compute lane to compute, blocking copy, or idle.

    Compute-lane gaps covered by a synchronous copy count as copy; every
    other gap (waiting on an asynchronous prefetch, launch slack) is idle.
    """
    busy = [(e.start, e.end) for e in events if e.lane == COMPUTE and e.kind != "idle"]
    compute = _union_length(busy)
    gaps = []
    t = 0.0
    for s, e in sorted(busy):
        if s > t:
            gaps.append((t, s))
        t = max(t, e)
    if tpot > t:
        gaps.append((t, tpot))
    blocking = [(e.start, e.end) for e in events if e.lane == COPY and e.blocking]
    copy = 0.0
    for g in gaps:
        copy += _union_length([(max(g[0], b[0]), min(g[1], b[1])) for b in blocking if _overlap(g, b) > 0])
    idle = max(0.0, tpot - compute - copy)
    return Breakdown(compute, copy, idle)


def _compute_events(tm: TimingModel, l: int, start: float) -> tuple[list[ScheduleEvent], float]:
    a_end = start + tm.t_attn[l]
    g_end = a_end + tm.t_gate[l]
    return [ScheduleEvent(COMPUTE, "attn", l, start, a_end), ScheduleEvent(COMPUTE, "gate", l, a_end, g_end)], g_end


def simulate_on_demand(tm: TimingModel) -> ScheduleReport:
    """Serial: attention, gating, blocking copy, expert FFN for every layer."""
    events: list[ScheduleEvent] = []
    t = 0.0
    for l in range(tm.L):
        evs, g_end = _compute_events(tm, l, t)
        events += evs
        c_end = g_end + tm.t_copy[l]
        events.append(ScheduleEvent(COPY, "copy", l, g_end, c_end, blocking=True))
        t = c_end + tm.t_expert[l]
        events.append(ScheduleEvent(COMPUTE, "expert", l, c_end, t))
    _add_idle(events)
    return ScheduleReport("on_demand", events, t)


def simulate_prefetch(tm: TimingModel) -> ScheduleReport:
    """Event recurrence for prefetching with a FIFO copy lane.

    Layer 0 copies synchronously after gating (cold start). At every layer
    the next layer's copy starts at max(gate done, this layer's copy done);
    the expert FFN starts at max(gate done, copy done); the next layer's
    attention starts when this layer's FFN ends. Nothing is prefetched past
    the last layer.
    """
    events: list[ScheduleEvent] = []
    t = 0.0
    copy_done = 0.0
    for l in range(tm.L):
        evs, g_end = _compute_events(tm, l, t)
        events += evs
        if l == 0:
            c_start = g_end
            copy_done = c_start + tm.cold_start_copy
            events.append(ScheduleEvent(COPY, "copy", 0, c_start, copy_done, blocking=True))
        if l + 1 < tm.L:
            n_start = max(copy_done, g_end)
            n_done = n_start + tm.t_copy[l + 1]
            events.append(ScheduleEvent(COPY, "copy", l + 1, n_start, n_done))
        e_start = max(g_end, copy_done)
        t = e_start + tm.t_expert[l]
        events.append(ScheduleEvent(COMPUTE, "expert", l, e_start, t))
        if l + 1 < tm.L:
            copy_done = n_done
    _add_idle(events)
    return ScheduleReport("prefetch", events, t)


def _add_idle(events: list[ScheduleEvent]) -> None:
    t = 0.0
    busy = sorted((e for e in events if e.lane == COMPUTE), key=lambda e: e.start)
    for e in busy:
        if e.start > t:
            events.append(ScheduleEvent(COMPUTE, "idle", e.layer, t, e.start))
        t = max(t, e.end)


def analytic_improvement(tm: TimingModel) -> float:
    """Closed-form TPOT saving: sum over layers of min(copy, compute)."""
    return float(np.minimum(tm.t_copy, tm.t_compute).sum())


def analytic_on_demand(tm: TimingModel) -> float:
    return float((tm.t_compute + tm.t_copy).sum())


def analytic_speedup(tm: TimingModel) -> float:
    ond = analytic_on_demand(tm)
    return ond / (ond - analytic_improvement(tm))


def breakdown(report: ScheduleReport) -> dict[str, float]:
    return report.breakdown.fractions()


def boundary_term(tm: TimingModel) -> float:
    return float(tm.t_copy.max() + tm.t_compute.max())


# ---------------------------------------------------------------------------
# event-log checks shared by the simulator and the measured executor


def check_copy_serialization(events: Sequence[ScheduleEvent], tol: float = 0.0) -> None:
    copies = sorted((e for e in events if e.lane == COPY), key=lambda e: e.start)
    for a, b in zip(copies, copies[1:]):
        if b.start < a.end - tol:
            raise AssertionError(f"copy events overlap: {a} and {b}")


def check_read_after_ready(events: Sequence[ScheduleEvent], tol: float = 0.0) -> None:
    """Every expert compute event starts after its layer's most recent copy ended."""
    copies = sorted((e for e in events if e.lane == COPY), key=lambda e: e.end)
    for ex in (e for e in events if e.lane == COMPUTE and e.kind == "expert"):
        ready = [c for c in copies if c.layer == ex.layer and c.start <= ex.start + tol]
        if not ready or ready[-1].end > ex.start + tol:
            raise AssertionError(f"expert compute {ex} starts before its copy is ready")


def max_resident_layers(intervals: Sequence[tuple[float, float]]) -> int:
    """Peak number of simultaneously resident layers from (load start, release) intervals."""
    points = []
    for s, e in intervals:
        points.append((s, 1))
        points.append((e, -1))
    peak = cur = 0
    for _, d in sorted(points, key=lambda p: (p[0], p[1])):
        cur += d
        peak = max(peak, cur)
    return peak


def residency_from_events(events: Sequence[ScheduleEvent]) -> list[tuple[float, float]]:
    """Residency of each copied layer: from copy start to end of its expert compute."""
    experts = {}
    for e in events:
        if e.lane == COMPUTE and e.kind == "expert":
            experts.setdefault(e.layer, []).append(e)
    out = []
    for c in (e for e in events if e.lane == COPY):
        users = [x for x in experts.get(c.layer, []) if x.start >= c.end - 1e-9]
        release = min((x.end for x in users), default=c.end)
        out.append((c.start, release))
    return out


# ---------------------------------------------------------------------------
# presets and outputs

# Table of public MoE geometries: L, E, H, H_moe.
MODEL_GEOMETRIES = {
    "qwen3-30b-a3b": (48, 128, 2048, 768),
    "glm-4.7-flash": (47, 64, 2048, 1536),
    "gpt-oss-120b": (24, 32, 2880, 2880),
    "qwen3-235b-a22b": (94, 128, 4096, 1536),
}


def copy_time_us(k: int, H: int, H_moe: int, bytes_per_param: int = 2, bandwidth: float = DEFAULT_BANDWIDTH) -> float:
    """Time to move k SwiGLU experts (3 * H * H_moe params each) at ``bandwidth`` B/s."""
    return k * 3 * H * H_moe * bytes_per_param / bandwidth * 1e6


def geometry_preset(
    name: str,
    k: int,
    compute_share: float = 0.13,
    split: tuple[float, float, float] = (0.3, 0.1, 0.6),
    bandwidth: float = DEFAULT_BANDWIDTH,
) -> TimingModel:
    """Uniform timing model for a named geometry.

    Copy time follows from bandwidth; per-layer compute is set so that
    compute is ``compute_share`` of the on-demand TPOT, split across
    attention / gating / expert by ``split``.
    """
    try:
        L, _E, H, H_moe = MODEL_GEOMETRIES[name]
    except KeyError:
        raise TimingError(f"unknown geometry {name!r}; choose from {sorted(MODEL_GEOMETRIES)}") from None
    if not 0 < compute_share < 1:
        raise TimingError("compute_share must be in (0, 1)")
    copy = copy_time_us(k, H, H_moe, bandwidth=bandwidth)
    compute = copy * compute_share / (1 - compute_share)
    a, g, e = (compute * s / sum(split) for s in split)
    return TimingModel.uniform(L, a, g, e, copy, name=name)


def uniform_example(L: int = 48) -> TimingModel:
    return TimingModel.uniform(L, 1.0, 1.0, 2.0, 10.0, name="uniform")


PRESET_DIR = Path(__file__).with_name("presets")


def builtin_presets() -> dict[str, Path]:
    return {p.stem: p for p in sorted(PRESET_DIR.glob("*.json"))}


def resolve_timing(spec: str, k: int | None = None) -> TimingModel:
    """A path to a timing JSON, a builtin preset name, or a geometry name (needs k)."""
    p = Path(spec)
    if p.exists():
        return TimingModel.load(p)
    presets = builtin_presets()
    if spec in presets and k is None:
        return TimingModel.load(presets[spec])
    if spec in MODEL_GEOMETRIES:
        if k is None:
            raise TimingError(f"geometry preset {spec!r} needs k")
        return geometry_preset(spec, k)
    raise TimingError(f"no timing file or preset named {spec!r}")


def timeline_json(report: ScheduleReport) -> list[dict]:
    return [e.to_json() for e in sorted(report.events, key=lambda e: (e.start, e.lane))]


def summary_rows(reports: Sequence[ScheduleReport]):
    for r in reports:
        f = breakdown(r)
        yield (r.mode, float(r.tpot), f["compute_frac"], f["copy_frac"], f["idle_frac"])
