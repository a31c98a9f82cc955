"""Lightweight router estimator distilled from the true next-layer router.

Architecture, for input ``q`` (width d) at layer ``l`` with latent width
``w = d / m`` and hidden width ``w * n``::

    z = A q + pos[l]
    h = z + C silu(B z)
    y = LayerNorm(h) * ln_gain + ln_bias
    logits = W_head y

Training minimizes KL(softmax(true) || softmax(predicted)) with Adam.
Gradients are written out by hand; every function works in whatever float
dtype the parameters carry, so the float64 path doubles as the gradient
check oracle's reference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorio
from .numerics import F32, Rng, derive_seed, sigmoid, silu

log = logging.getLogger(__name__)

PARAM_NAMES = ("A", "pos", "B", "C", "ln_gain", "ln_bias", "W_head")


class EstimatorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    d: int
    E: int
    L: int
    m: int = 2
    n: int = 4
    eps: float = 1e-5
    seed: int = 0

    def validate(self) -> "EstimatorConfig":
        if self.m <= 1 or self.n <= 1:
            raise EstimatorConfigError(f"m > 1 and n > 1 required (m={self.m}, n={self.n})")
        if self.d % self.m:
            raise EstimatorConfigError(f"d={self.d} not divisible by m={self.m}")
        if self.d // self.m < 1 or self.E < 1 or self.L < 1:
            raise EstimatorConfigError("latent width, E and L must be >= 1")
        return self

    @property
    def width(self) -> int:
        return self.d // self.m

    @property
    def hidden(self) -> int:
        return self.width * self.n

    def param_count(self) -> int:
        w = self.width
        return self.d * w + self.L * w + 2 * self.n * w * w + 2 * w + w * self.E

    @classmethod
    def from_dict(cls, raw: dict) -> "EstimatorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known}).validate()


@dataclass
class EstimatorParams:
    config: EstimatorConfig
    A: np.ndarray  # (w, d)
    pos: np.ndarray  # (L, w)
    B: np.ndarray  # (w*n, w)
    C: np.ndarray  # (w, w*n)
    ln_gain: np.ndarray  # (w,)
    ln_bias: np.ndarray  # (w,)
    W_head: np.ndarray  # (E, w)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def astype(self, dtype) -> "EstimatorParams":
        return EstimatorParams(self.config, *(getattr(self, k).astype(dtype) for k in PARAM_NAMES))

    def copy(self) -> "EstimatorParams":
        return self.astype(self.A.dtype)

    @classmethod
    def zeros_like(cls, other: "EstimatorParams") -> "EstimatorParams":
        return cls(other.config, *(np.zeros_like(getattr(other, k)) for k in PARAM_NAMES))


def init_params(cfg: EstimatorConfig, dtype=F32) -> EstimatorParams:
    cfg = cfg.validate()
    w, hid = cfg.width, cfg.hidden

    def draw(name, shape, std):
        return Rng(derive_seed(cfg.seed, f"estimator.{name}")).normal(shape, std).astype(dtype)

    return EstimatorParams(
        cfg,
        A=draw("A", (w, cfg.d), 1.0 / np.sqrt(cfg.d)),
        pos=draw("pos", (cfg.L, w), 0.02),
        B=draw("B", (hid, w), 1.0 / np.sqrt(w)),
        C=draw("C", (w, hid), 0.1 / np.sqrt(hid)),
        ln_gain=np.ones(w, dtype=dtype),
        ln_bias=np.zeros(w, dtype=dtype),
        W_head=draw("W_head", (cfg.E, w), 1.0 / np.sqrt(w)),
    )


# ---------------------------------------------------------------------------
# forward / loss / backward


def _forward(p: EstimatorParams, X: np.ndarray, layers: np.ndarray):
    eps = p.A.dtype.type(p.config.eps)
    z = X @ p.A.T + p.pos[layers]
    u = z @ p.B.T
    a = silu(u)
    h = z + a @ p.C.T
    mu = h.mean(axis=1, keepdims=True)
    xc = h - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * p.ln_gain + p.ln_bias
    logits = y @ p.W_head.T
    return logits, (X, layers, z, u, a, xhat, inv, y)


def forward_batch(params: EstimatorParams, X, layers) -> np.ndarray:
    X = np.asarray(X, dtype=params.A.dtype)
    layers = np.asarray(layers, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != params.config.d:
        raise ValueError(f"input width {X.shape} does not match d={params.config.d}")
    if layers.size and (layers.min() < 0 or layers.max() >= params.config.L):
        raise IndexError("layer out of range")
    return _forward(params, X, layers)[0]


def estimator_forward(params: EstimatorParams, q, layer: int) -> np.ndarray:
    if not 0 <= layer < params.config.L:
        raise IndexError(f"layer {layer} out of range [0, {params.config.L})")
    return forward_batch(params, np.asarray(q)[None, :], np.array([layer]))[0]


def _log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _kl_rows(true_logits, pred_logits):
    lp = _log_softmax(true_logits)
    lq = _log_softmax(pred_logits)
    p = np.exp(lp)
    return (p * (lp - lq)).sum(axis=-1), p, lq


def batch_loss(params: EstimatorParams, X, layers, true_logits, weights=None) -> float:
    """Weighted mean over samples of KL(softmax(true) || softmax(pred))."""
    pred = forward_batch(params, X, layers)
    kl, _, _ = _kl_rows(np.asarray(true_logits, dtype=pred.dtype), pred)
    w = np.ones(len(kl), dtype=pred.dtype) if weights is None else np.asarray(weights, dtype=pred.dtype)
    return float((w * kl).sum() / len(kl))


def distill_loss(params: EstimatorParams, q, layer: int, true_logits) -> float:
    return batch_loss(params, np.asarray(q)[None, :], np.array([layer]), np.asarray(true_logits)[None, :])


def backward(params: EstimatorParams, X, layers, true_logits, weights=None) -> tuple[float, EstimatorParams]:
    """Loss and exact gradient of ``batch_loss`` with respect to every parameter."""
    dt = params.A.dtype
    X = np.asarray(X, dtype=dt)
    layers = np.asarray(layers, dtype=np.int64)
    pred, (X, layers, z, u, a, xhat, inv, y) = _forward(params, X, layers)
    kl, p, lq = _kl_rows(np.asarray(true_logits, dtype=dt), pred)
    N = len(kl)
    w = np.ones(N, dtype=dt) if weights is None else np.asarray(weights, dtype=dt)
    loss = float((w * kl).sum() / N)

    dlogits = (np.exp(lq) - p) * (w / N)[:, None]
    g_head = dlogits.T @ y
    dy = dlogits @ params.W_head
    g_gain = (dy * xhat).sum(axis=0)
    g_bias = dy.sum(axis=0)
    dxhat = dy * params.ln_gain
    dh = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    g_C = dh.T @ a
    da = dh @ params.C
    sg = sigmoid(u)
    du = da * (sg * (1 + u * (1 - sg)))
    g_B = du.T @ z
    dz = dh + du @ params.B
    g_pos = np.zeros_like(params.pos)
    np.add.at(g_pos, layers, dz)
    g_A = dz.T @ X
    grads = EstimatorParams(params.config, g_A, g_pos, g_B, g_C, g_gain, g_bias, g_head)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: EstimatorParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = EstimatorParams.zeros_like(params)
        self.v = EstimatorParams.zeros_like(params)
        self.step_count = 0

    def step(self, params: EstimatorParams, grads: EstimatorParams, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr == 0:
            return
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for k in PARAM_NAMES:
            g = getattr(grads, k)
            m = getattr(self.m, k)
            v = getattr(self.v, k)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            getattr(params, k)[...] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(g.dtype)


# ---------------------------------------------------------------------------
# data, training, evaluation


@dataclass
class DistillData:
    """Samples ordered token-major: row = token * (L - 1) + layer."""

    X: np.ndarray
    layers: np.ndarray
    targets: np.ndarray
    n_tokens: int
    per_token: int

    def tokens(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = (idx[:, None] * self.per_token + np.arange(self.per_token)[None, :]).ravel()
        return self.X[rows], self.layers[rows], self.targets[rows]

    def split(self, val_frac: float = 0.1) -> tuple["DistillData", "DistillData"]:
        """Temporal split: the last ``val_frac`` of tokens is held out."""
        n_val = max(1, int(round(self.n_tokens * val_frac)))
        cut = (self.n_tokens - n_val) * self.per_token

        def part(a, b, n):
            return DistillData(self.X[a:b], self.layers[a:b], self.targets[a:b], n, self.per_token)

        return part(0, cut, self.n_tokens - n_val), part(cut, None, n_val)


def build_distill_data(trace, inputs: str = "quasi", table=None, model=None) -> DistillData:
    """Pairs (input at layer l, true router logits at layer l+1) for l in 0..L-2.

    ``inputs="quasi"`` uses quasi-hidden states (needs ``table``);
    ``inputs="self"`` uses the true next router input s_{l+1}.
    """
    from .speculation import quasi_hidden_batch

    c = trace.config
    if trace.n_tokens == 0:
        raise ValueError("empty trace")
    if c.L < 2:
        raise ValueError("need at least two layers")
    T, Lm1 = trace.n_tokens, c.L - 1
    X = np.zeros((T, Lm1, c.H), dtype=F32)
    for l in range(Lm1):
        if inputs == "self":
            X[:, l] = trace.s[:, l + 1]
        elif inputs == "quasi":
            if table is None:
                raise ValueError("quasi inputs need a default-vector table")
            gain = model.layers[l + 1].moe_norm if model is not None else np.ones(c.H, dtype=F32)
            X[:, l] = quasi_hidden_batch(trace.r[:, l], trace.ids[:, l], trace.gates[:, l], table, l, gain, c.eps)
        else:
            raise ValueError(f"unknown input kind {inputs!r}")
    targets = trace.router_logits[:, 1:].astype(F32)
    layers = np.broadcast_to(np.arange(Lm1), (T, Lm1))
    return DistillData(X.reshape(-1, c.H), layers.reshape(-1).copy(), targets.reshape(-1, c.E), T, Lm1)


def topk_rows(logits: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def recall_rows(pred_logits: np.ndarray, true_logits: np.ndarray, k: int) -> np.ndarray:
    a = topk_rows(pred_logits, k)
    b = topk_rows(true_logits, k)
    return (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1) / k


def eval_hit_rate(params: EstimatorParams, data: DistillData, k: int, chunk: int = 65536) -> np.ndarray:
    """Per-layer mean recall@k of estimator top-k against the true next-layer top-k."""
    hits = np.zeros(data.per_token)
    counts = np.zeros(data.per_token)
    for s in range(0, len(data.X), chunk):
        sl = slice(s, s + chunk)
        pred = forward_batch(params, data.X[sl], data.layers[sl])
        r = recall_rows(pred, data.targets[sl], k)
        hits += np.bincount(data.layers[sl], weights=r, minlength=data.per_token)
        counts += np.bincount(data.layers[sl], minlength=data.per_token)
    return hits / np.maximum(counts, 1)


def _val_stats(params, val: DistillData, k: int) -> tuple[float, float]:
    kl = batch_loss(params, val.X, val.layers, val.targets)
    return kl, float(eval_hit_rate(params, val, k).mean())


@dataclass
class TrainResult:
    params: EstimatorParams
    curve: list[tuple[int, float, float]]  # (tokens_seen, val_kl, val_hit_rate)


def train_estimator(
    data: DistillData,
    cfg: EstimatorConfig,
    k: int,
    lr: float = 3e-3,
    batch: int = 256,
    steps: int = 1000,
    eval_every: int = 100,
    val_frac: float = 0.1,
    lr_decay: bool = True,
    params: EstimatorParams | None = None,
) -> TrainResult:
    """Adam on token batches; the held-out tail is never trained on.

    ``batch`` counts tokens; each token contributes one sample per
    predictable layer. With ``lr_decay`` the rate follows a cosine from
    ``lr`` down to ``lr / 10``.
    """
    cfg = cfg.validate()
    train, val = data.split(val_frac)
    if train.n_tokens == 0:
        raise ValueError("empty training split")
    params = params.copy() if params is not None else init_params(cfg)
    opt = Adam(params, lr)
    order_rng = Rng(derive_seed(cfg.seed, "estimator.order"))
    order = _permutation(order_rng, train.n_tokens)
    cursor = 0
    tokens_seen = 0
    curve = [(0, *_val_stats(params, val, k))]
    for step in range(1, steps + 1):
        if cursor + batch > len(order):
            order = _permutation(order_rng, train.n_tokens)
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += len(idx)
        X, layers, targets = train.tokens(idx)
        _, grads = backward(params, X, layers, targets)
        step_lr = lr * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * (step - 1) / steps))) if lr_decay else lr
        opt.step(params, grads, step_lr)
        tokens_seen += len(idx)
        if step % eval_every == 0 or step == steps:
            kl, hr = _val_stats(params, val, k)
            curve.append((tokens_seen, kl, hr))
            log.info("step %d tokens %d val_kl %.4f val_hit %.4f", step, tokens_seen, kl, hr)
    return TrainResult(params, curve)


def _permutation(rng: Rng, n: int) -> np.ndarray:
    return np.argsort(rng.uniform(n), kind="stable")


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# persistence


def save_estimator(params: EstimatorParams, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "estimator.json").write_text(json.dumps(asdict(params.config), indent=2, sort_keys=True) + "\n")
    written = [out / "estimator.json"]
    for k in PARAM_NAMES:
        tensorio.save(out / f"{k}.moet", getattr(params, k))
        written.append(out / f"{k}.moet")
    return written


def load_estimator(bundle_dir) -> EstimatorParams:
    d = Path(bundle_dir)
    cfg = EstimatorConfig.from_dict(json.loads((d / "estimator.json").read_text()))
    return EstimatorParams(cfg, *(tensorio.load(d / f"{k}.moet") for k in PARAM_NAMES))


def write_curve(path, curve) -> str:
    from .metrics import write_csv

    return write_csv(path, ("tokens", "val_kl", "val_hit_rate"), ((t, float(kl), float(hr)) for t, kl, hr in curve))
