"""Seeded toy pre-norm MoE decoder with per-layer instrumentation.

Block structure, for every layer ``l``::

    r_l = h + Attn_l(RMSNorm(h))          post-attention residual
    s_l = RMSNorm_l(r_l)                  router input
    m_l = sum_e g_e * Expert_e(s_l)       MoE output
    h   = r_l + m_l

Batch size is fixed at one; the decode loop is written for a single token at
a time and exposes hook points so the speculative and offloaded executors can
swap in their own expert decisions and expert weight sources.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensorio
from .numerics import F32, Rng, derive_seed, linear, rms_norm, silu, softmax, top_k

GATING_ORDERS = ("softmax_topk", "topk_softmax")


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    L: int = 8
    E: int = 16
    k: int = 4
    H: int = 64
    H_moe: int = 128
    vocab: int = 256
    head_dim: int = 32
    eps: float = 1e-6
    seed: int = 0
    gating: str = "softmax_topk"
    init_scale: float = 0.4

    def validate(self) -> "ModelConfig":
        if self.L < 1:
            raise ConfigError(f"L >= 1 violated (L={self.L})")
        if not 1 <= self.k <= self.E:
            raise ConfigError(f"1 <= k <= E violated (k={self.k}, E={self.E})")
        for name in ("H", "H_moe", "vocab", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} >= 1 violated ({name}={getattr(self, name)})")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embedding (head_dim={self.head_dim})")
        if self.eps <= 0:
            raise ConfigError(f"eps > 0 violated (eps={self.eps})")
        if self.gating not in GATING_ORDERS:
            raise ConfigError(f"gating must be one of {GATING_ORDERS}")
        return self

    def expert_bytes(self, bytes_per_param: int = 2) -> int:
        """Total expert weight footprint: L * E * 3 * H * H_moe * bytes."""
        return self.L * self.E * 3 * self.H * self.H_moe * bytes_per_param

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d).validate()


PRESETS = {
    "toy": ModelConfig(L=8, E=16, k=4, H=64, H_moe=128, vocab=256, head_dim=32),
    "toy-large": ModelConfig(L=12, E=32, k=4, H=128, H_moe=256, vocab=256, head_dim=64),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**asdict(base), **overrides}).validate()


@dataclass
class ExpertWeights:
    """One SwiGLU expert. Treat as immutable: ``w_in`` fuses gate and up."""

    w_gate: np.ndarray  # (H_moe, H)
    w_up: np.ndarray  # (H_moe, H)
    w_down: np.ndarray  # (H, H_moe)
    w_in: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.w_gate.shape != self.w_up.shape:
            raise ValueError(f"w_gate {self.w_gate.shape} and w_up {self.w_up.shape} differ")
        self.w_in = np.concatenate([self.w_gate, self.w_up]).astype(F32)
        n = self.w_gate.shape[0]
        self.w_gate, self.w_up = self.w_in[:n], self.w_in[n:]
        self.w_down = np.asarray(self.w_down, dtype=F32)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    moe_norm: np.ndarray
    wq: np.ndarray  # (head_dim, H)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (H, head_dim)
    gate: np.ndarray  # (E, H)
    experts: list[ExpertWeights]
    w_qkv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.w_qkv = np.concatenate([self.wq, self.wk, self.wv]).astype(F32)


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray  # (vocab, H)
    unembed: np.ndarray  # (vocab, H)
    final_norm: np.ndarray
    layers: list[LayerWeights]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "unembed": self.unembed, "final_norm": self.final_norm}
        for l, lw in enumerate(self.layers):
            for name in ("attn_norm", "moe_norm", "wq", "wk", "wv", "wo", "gate"):
                out[f"layer{l}.{name}"] = getattr(lw, name)
            for e, ew in enumerate(lw.experts):
                for name in ("w_gate", "w_up", "w_down"):
                    out[f"layer{l}.expert{e}.{name}"] = getattr(ew, name)
        return out


@dataclass(frozen=True)
class RouterDecision:
    ids: tuple[int, ...]
    gates: tuple[float, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.gates):
            raise ValueError("ids and gates differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"duplicate expert ids {self.ids}")

    @property
    def k(self) -> int:
        return len(self.ids)

    def gate_array(self) -> np.ndarray:
        return np.asarray(self.gates, dtype=F32)


def build_model(config: ModelConfig) -> Model:
    """Draw every weight matrix from its own labeled splitmix64 stream.

    Matrices are N(0, (init_scale / sqrt(H))^2); norm gains start at one.
    """
    c = config.validate()
    std = c.init_scale / np.sqrt(c.H)

    def draw(name: str, shape) -> np.ndarray:
        return Rng(derive_seed(c.seed, name)).normal(shape, std)

    ones = lambda: np.ones(c.H, dtype=F32)  # noqa: E731
    layers = []
    for l in range(c.L):
        p = f"layer{l}."
        experts = [
            ExpertWeights(
                w_gate=draw(f"{p}expert{e}.w_gate", (c.H_moe, c.H)),
                w_up=draw(f"{p}expert{e}.w_up", (c.H_moe, c.H)),
                w_down=draw(f"{p}expert{e}.w_down", (c.H, c.H_moe)),
            )
            for e in range(c.E)
        ]
        layers.append(
            LayerWeights(
                attn_norm=ones(),
                moe_norm=ones(),
                wq=draw(p + "wq", (c.head_dim, c.H)),
                wk=draw(p + "wk", (c.head_dim, c.H)),
                wv=draw(p + "wv", (c.head_dim, c.H)),
                wo=draw(p + "wo", (c.H, c.head_dim)),
                gate=draw(p + "gate", (c.E, c.H)),
                experts=experts,
            )
        )
    return Model(
        config=c,
        embed=draw("embed", (c.vocab, c.H)),
        unembed=draw("unembed", (c.vocab, c.H)),
        final_norm=ones(),
        layers=layers,
    )


def save_model(model: Model, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")
    written = [out / "config.json"]
    for name, arr in model.named_tensors().items():
        path = out / f"{name}.moet"
        tensorio.save(path, arr)
        written.append(path)
    return written


def load_model(bundle_dir) -> Model:
    d = Path(bundle_dir)
    config = ModelConfig.from_dict(json.loads((d / "config.json").read_text()))
    t = lambda name: tensorio.load(d / f"{name}.moet")  # noqa: E731
    layers = []
    for l in range(config.L):
        p = f"layer{l}."
        layers.append(
            LayerWeights(
                attn_norm=t(p + "attn_norm"),
                moe_norm=t(p + "moe_norm"),
                wq=t(p + "wq"),
                wk=t(p + "wk"),
                wv=t(p + "wv"),
                wo=t(p + "wo"),
                gate=t(p + "gate"),
                experts=[
                    ExpertWeights(*(t(f"{p}expert{e}.{n}") for n in ("w_gate", "w_up", "w_down")))
                    for e in range(config.E)
                ],
            )
        )
    return Model(config, t("embed"), t("unembed"), t("final_norm"), layers)


# ---------------------------------------------------------------------------
# routing and experts


def decision_from_logits(logits, k: int, gating: str = "softmax_topk") -> RouterDecision:
    """Top-k selection with gates renormalized over the selected experts."""
    logits = np.asarray(logits, dtype=F32)
    if gating == "softmax_topk":
        probs = softmax(logits)
        ids, mass = top_k(probs, k)
        gates = mass / mass.sum()
    elif gating == "topk_softmax":
        ids, sel = top_k(logits, k)
        gates = softmax(sel)
    else:
        raise ConfigError(f"unknown gating order {gating!r}")
    return RouterDecision(tuple(int(i) for i in ids), tuple(float(g) for g in gates))


def router(x_norm, gate, k: int, gating: str = "softmax_topk") -> tuple[np.ndarray, RouterDecision]:
    logits = linear(gate, x_norm)
    return logits, decision_from_logits(logits, k, gating)


def expert_ffn(x_norm, expert: ExpertWeights) -> np.ndarray:
    """SwiGLU expert: W_down (silu(W_gate x) * (W_up x))."""
    u = linear(expert.w_in, x_norm)
    n = expert.w_down.shape[1]
    return linear(expert.w_down, silu(u[:n]) * u[n:])


def combine_outputs(outputs: Sequence[np.ndarray], gates: Sequence[float]) -> np.ndarray:
    m = np.zeros_like(outputs[0])
    for g, o in zip(gates, outputs):
        m = m + F32(g) * o
    return m


def moe_block(x_norm, decision: RouterDecision, experts: Sequence[ExpertWeights] | Mapping[int, ExpertWeights]) -> np.ndarray:
    n = len(experts)
    for e in decision.ids:
        if isinstance(experts, Mapping):
            if e not in experts:
                raise IndexError(f"expert {e} not available")
        elif not 0 <= e < n:
            raise IndexError(f"expert index {e} out of range [0, {n})")
    outs = [expert_ffn(x_norm, experts[e]) for e in decision.ids]
    return combine_outputs(outs, decision.gates)


# ---------------------------------------------------------------------------
# attention


class _KV:
    __slots__ = ("keys", "values", "n")

    def __init__(self, head_dim: int, cap: int = 64):
        self.keys = np.empty((cap, head_dim), dtype=F32)
        self.values = np.empty((cap, head_dim), dtype=F32)
        self.n = 0

    def stage(self, k, v):
        """Write k/v into the next slot without committing it."""
        if self.n == len(self.keys):
            self.keys = np.concatenate([self.keys, np.empty_like(self.keys)])
            self.values = np.concatenate([self.values, np.empty_like(self.values)])
        self.keys[self.n] = k
        self.values[self.n] = v


@dataclass
class DecodeState:
    """Per-layer key/value history for one decode stream."""

    kv: list[_KV]
    position: int = 0

    @classmethod
    def empty(cls, config: ModelConfig) -> "DecodeState":
        return cls([_KV(config.head_dim) for _ in range(config.L)])

    def check(self, layer: int, position: int) -> None:
        if self.position != position or self.kv[layer].n != position:
            raise ValueError(
                f"inconsistent decode state at layer {layer}: history {self.kv[layer].n}, "
                f"state position {self.position}, requested {position}"
            )


@functools.lru_cache(maxsize=8192)
def _rope_table(position: int, dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = base ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    ang = position * inv_freq
    return np.cos(ang).astype(F32), np.sin(ang).astype(F32)


def rope(x: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs (2i, 2i+1) by position * base^(-2i/dim)."""
    cos, sin = _rope_table(position, x.size, base)
    x0, x1 = x[0::2], x[1::2]
    out = np.empty_like(x)
    out[0::2] = x0 * cos - x1 * sin
    out[1::2] = x0 * sin + x1 * cos
    return out


def attention_step(x_norm, state: DecodeState, layer: int, weights: LayerWeights, position: int, commit: bool = True) -> np.ndarray:
    """Single-head causal attention with rotary embedding over the cached history.

    With ``commit=False`` the current key/value are not appended; the result
    is bit-identical to the committing call.
    """
    state.check(layer, position)
    qkv = linear(weights.w_qkv, x_norm)
    hd = weights.wq.shape[0]
    q = rope(qkv[:hd], position)
    k = rope(qkv[hd : 2 * hd], position)
    v = qkv[2 * hd :]
    kv = state.kv[layer]
    kv.stage(k, v)
    n = kv.n + 1
    scores = (kv.keys[:n] @ q) * F32(1.0 / np.sqrt(q.size))
    p = softmax(scores)
    out = linear(weights.wo, p @ kv.values[:n])
    if commit:
        kv.n = n
    return out


# ---------------------------------------------------------------------------
# decode loop


@dataclass
class LayerContext:
    """Everything known at layer ``layer`` once gating has run."""

    layer: int
    r: np.ndarray
    s: np.ndarray
    logits: np.ndarray
    decision: RouterDecision  # true router on the actual residual stream
    executed: RouterDecision | None = None
    state: DecodeState | None = None
    position: int = 0
    true_next: RouterDecision | None = None  # known only when replaying a trace


@dataclass
class LayerRecord:
    token_index: int
    layer: int
    s: np.ndarray
    r: np.ndarray
    logits: np.ndarray
    decision: RouterDecision
    executed: RouterDecision
    expert_out: np.ndarray  # (k, H), raw outputs of the executed experts
    m: np.ndarray


class DecodeHooks:
    """Default hooks: execute the true router decision with resident weights."""

    def decide(self, model: Model, ctx: LayerContext) -> RouterDecision:
        return ctx.decision

    def after_decide(self, model: Model, ctx: LayerContext) -> None:
        pass

    def expert_weights(self, model: Model, layer: int, decision: RouterDecision):
        return model.layers[layer].experts

    def mark(self, layer: int, phase: str) -> None:
        pass

    def layer_done(self, layer: int) -> None:
        pass


_DEFAULT_HOOKS = DecodeHooks()


def forward_decode(
    model: Model,
    state: DecodeState,
    token: int,
    sink: Callable[[LayerRecord], None] | None = None,
    hooks: DecodeHooks | None = None,
    token_index: int = 0,
) -> np.ndarray:
    c = model.config
    if not 0 <= token < c.vocab:
        raise ValueError(f"token {token} outside vocab of size {c.vocab}")
    hooks = hooks or _DEFAULT_HOOKS
    pos = state.position
    h = model.embed[token].copy()
    for l, lw in enumerate(model.layers):
        hooks.mark(l, "start")
        r = h + attention_step(rms_norm(h, lw.attn_norm, c.eps), state, l, lw, pos)
        hooks.mark(l, "attn")
        s = rms_norm(r, lw.moe_norm, c.eps)
        logits, decision = router(s, lw.gate, c.k, c.gating)
        hooks.mark(l, "gate")
        ctx = LayerContext(l, r, s, logits, decision, state=state, position=pos)
        ctx.executed = hooks.decide(model, ctx)
        hooks.after_decide(model, ctx)
        experts = hooks.expert_weights(model, l, ctx.executed)
        outs = [expert_ffn(s, experts[e]) for e in ctx.executed.ids]
        m = combine_outputs(outs, ctx.executed.gates)
        hooks.mark(l, "expert")
        if sink is not None:
            sink(LayerRecord(token_index, l, s, r, logits, decision, ctx.executed, np.stack(outs), m))
        h = r + m
        hooks.layer_done(l)
    state.position += 1
    return linear(model.unembed, rms_norm(h, model.final_norm, c.eps))


def generate(
    model: Model,
    prompt: Sequence[int],
    n_new: int,
    predictor=None,
    sink: Callable[[LayerRecord], None] | None = None,
    logits_out: list | None = None,
    hooks: DecodeHooks | None = None,
) -> list[int]:
    """Greedy generation. The prompt is prefilled with true routing.

    ``predictor`` selects the decode-time decision source; ``None`` is the
    true router. Layer 0 always routes with the true router.
    """
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    if hooks is None and predictor is not None:
        from .speculation import SpeculativeHooks

        hooks = SpeculativeHooks(predictor)
    state = DecodeState.empty(model.config)
    logits = None
    for tok in prompt:
        logits = forward_decode(model, state, int(tok))
    out: list[int] = []
    for i in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = forward_decode(model, state, nxt, sink=sink, hooks=hooks, token_index=i)
        if logits_out is not None:
            logits_out.append(logits)
    return out
