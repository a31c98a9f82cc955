"""Small dense kernels and the seeded PRNG everything else is built on.

All model math is float32. Functions accept anything ``np.asarray`` can
convert; dimension mismatches raise ``ValueError`` instead of broadcasting.
"""

from __future__ import annotations

import hashlib

import numpy as np

F32 = np.float32

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(counters: np.ndarray, seed: int) -> np.ndarray:
    """Counter-mode splitmix64: output i is mix(seed + (i + 1) * golden)."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + (counters + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, label: str) -> int:
    """Sub-seed for a labeled stage; adding labels never perturbs existing ones."""
    digest = hashlib.blake2b(f"{seed & _MASK64}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """splitmix64 stream. Identical seed gives identical draws on any platform.

    Gaussians use Box-Muller in float64 and are rounded to float32 once, so
    the float32 weights do not depend on FMA contraction.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _splitmix64(idx, self.seed)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        bits = self.next_u64(n) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        half = (size + 1) // 2
        u1 = 1.0 - self.uniform(half)  # (0, 1]
        u2 = self.uniform(half)
        rad = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([rad * np.cos(theta), rad * np.sin(theta)])[:size]
        return (z * std).astype(F32).reshape(shape)

    def integers(self, high: int, n: int) -> np.ndarray:
        """n integers uniform in [0, high)."""
        return (self.next_u64(n) % np.uint64(high)).astype(np.int64)


def _vec(v, name: str = "v") -> np.ndarray:
    if v.__class__ is np.ndarray and v.dtype == F32 and v.ndim == 1:
        return v
    arr = np.asarray(v, dtype=F32)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def softmax(v) -> np.ndarray:
    v = _vec(v)
    if v.size == 0:
        raise ValueError("softmax of empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax64(v) -> np.ndarray:
    """float64 softmax along the last axis (oracle / training path)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ValueError("softmax of empty vector")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def top_k(v, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries, descending; lower index wins ties."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError("top_k expects a 1-D vector")
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range for length {v.size}")
    idx = np.argsort(-v, kind="stable")[:k]
    return idx, v[idx]


def rms_norm(v, gamma, eps: float) -> np.ndarray:
    v = _vec(v)
    gamma = _vec(gamma, "gamma")
    if v.shape != gamma.shape:
        raise ValueError(f"length mismatch: {v.size} vs {gamma.size}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    denom = np.sqrt(np.add.reduce(v * v) / F32(v.size) + F32(eps))
    if denom == 0:
        return np.zeros_like(v)
    return v / denom * gamma


def sigmoid(x):
    x = np.asarray(x)
    half = x.dtype.type(0.5) if x.dtype.kind == "f" else 0.5
    return half + half * np.tanh(half * x)


def silu(x):
    """x * sigmoid(x); tanh form so large |x| never overflows."""
    x = np.asarray(x)
    out = x * sigmoid(x)
    return out if out.ndim else out.dtype.type(out)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def kl_divergence(p, q, atol: float = 1e-5) -> float:
    """KL(p || q) in float64, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be 1-D of equal length")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > atol:
            raise ValueError(f"{name} is not a probability distribution")
    support = p > 0
    if np.any(q[support] == 0):
        raise ValueError("support violation: q is zero where p is positive")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def linear(W, x, b=None) -> np.ndarray:
    if not isinstance(W, np.ndarray) or W.dtype != F32:
        W = np.asarray(W, dtype=F32)
    if x.__class__ is not np.ndarray or x.dtype != F32 or x.ndim != 1:
        x = _vec(x, "x")
    if W.ndim != 2 or W.shape[1] != x.shape[0]:
        raise ValueError(f"dim mismatch: W {W.shape} @ x ({x.size},)")
    out = W @ x
    if b is not None:
        b = _vec(b, "b")
        if b.size != W.shape[0]:
            raise ValueError(f"dim mismatch: bias ({b.size},) for output ({W.shape[0]},)")
        out = out + b
    return out
