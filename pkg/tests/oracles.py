"""Slow float64 reference implementations used as test oracles.

Written independently of the package kernels: explicit loops, no shared
helpers, double precision throughout.
"""

from __future__ import annotations

import math

import numpy as np


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def matvec(W, x):
    return [sum(float(W[i][j]) * float(x[j]) for j in range(len(x))) for i in range(len(W))]


def rms_norm(v, gamma, eps):
    ms = sum(float(x) * float(x) for x in v) / len(v)
    d = math.sqrt(ms + eps)
    return [float(x) / d * float(g) for x, g in zip(v, gamma)]


def silu(x):
    return x / (1.0 + math.exp(-x))


def rope(x, pos, base=10000.0):
    out = list(x)
    dim = len(x)
    for i in range(dim // 2):
        theta = pos * base ** (-2.0 * i / dim)
        a, b = x[2 * i], x[2 * i + 1]
        out[2 * i] = a * math.cos(theta) - b * math.sin(theta)
        out[2 * i + 1] = a * math.sin(theta) + b * math.cos(theta)
    return out


def expert(x, w_gate, w_up, w_down):
    g = matvec(w_gate, x)
    u = matvec(w_up, x)
    return matvec(w_down, [silu(a) * b for a, b in zip(g, u)])


def route(x, gate, k):
    p = softmax(matvec(gate, x))
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))[:k]
    tot = sum(p[i] for i in order)
    return order, [p[i] / tot for i in order]


class ReferenceModel:
    """Teacher-forced float64 decode of a package ``Model``'s weights."""

    def __init__(self, model):
        self.m = model
        self.keys = [[] for _ in model.layers]
        self.values = [[] for _ in model.layers]
        self.pos = 0

    def step(self, token):
        c = self.m.config
        h = [float(x) for x in self.m.embed[token]]
        decisions = []
        for l, lw in enumerate(self.m.layers):
            x = rms_norm(h, lw.attn_norm, c.eps)
            q = rope(matvec(lw.wq, x), self.pos)
            k = rope(matvec(lw.wk, x), self.pos)
            v = matvec(lw.wv, x)
            self.keys[l].append(k)
            self.values[l].append(v)
            scale = 1.0 / math.sqrt(len(q))
            p = softmax([sum(a * b for a, b in zip(kk, q)) * scale for kk in self.keys[l]])
            ctx = [sum(p[t] * self.values[l][t][j] for t in range(len(p))) for j in range(len(q))]
            r = [a + b for a, b in zip(h, matvec(lw.wo, ctx))]
            s = rms_norm(r, lw.moe_norm, c.eps)
            ids, gates = route(s, lw.gate, c.k)
            decisions.append(ids)
            m = [0.0] * c.H
            for e, g in zip(ids, gates):
                ew = lw.experts[e]
                y = expert(s, ew.w_gate, ew.w_up, ew.w_down)
                m = [a + g * b for a, b in zip(m, y)]
            h = [a + b for a, b in zip(r, m)]
        self.pos += 1
        out = rms_norm(h, self.m.final_norm, c.eps)
        return np.array(matvec(self.m.unembed, out)), decisions


def splitmix64_reference(seed, n):
    """Plain-integer splitmix64 stream (Vigna's reference recurrence)."""
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def simulate_by_hand(t_attn, t_gate, t_expert, t_copy, cold=None):
    """Straight-line prefetch timeline, one variable per event."""
    L = len(t_attn)
    cold = t_copy[0] if cold is None else cold
    t = 0.0
    copy_free = 0.0
    copy_done = {}
    for l in range(L):
        gate_done = t + t_attn[l] + t_gate[l]
        if l == 0:
            start = max(gate_done, copy_free)
            copy_done[0] = start + cold
            copy_free = copy_done[0]
        if l + 1 < L:
            start = max(copy_free, gate_done)
            copy_done[l + 1] = start + t_copy[l + 1]
            copy_free = copy_done[l + 1]
        t = max(gate_done, copy_done[l]) + t_expert[l]
    return t
