# %% [markdown]
# Next-layer expert prediction on the toy MoE
#
# Build the toy model, record a few thousand decode steps, then ask how
# well each predictor guesses layer l+1's experts from layer l's state.

# %%
from __future__ import annotations

import numpy as np

from expertspec.metrics import drift_report, evaluate_trace_batched
from expertspec.model import build_model, preset
from expertspec.speculation import accumulate_default_vectors, make_predictor
from expertspec.trace import random_tokens, record_trace

model = build_model(preset("toy"))
c = model.config
print(f"toy model: L={c.L} E={c.E} k={c.k} H={c.H}")

# %%
calib = record_trace(model, random_tokens(c.vocab, 3000, seed=1))
table = accumulate_default_vectors(calib)
held_out = record_trace(model, random_tokens(c.vocab, 3000, seed=2))

# %%
names = ["baseline-s", "router-pf", "oracle"]
res = evaluate_trace_batched(model, held_out, {n: make_predictor(n, table) for n in names}, table)
print("layer  " + "  ".join(f"{n:>10}" for n in names))
for row in res.comparison_rows():
    print(f"{row[0]:>5}  " + "  ".join(f"{v:10.3f}" for v in row[1:]))
print(f"chance level k/E = {c.k / c.E:.3f}")

# %% [markdown]
# How close is the predicted router input to the real one?

# %%
quasi, base = drift_report(model, held_out, table)
for l, (q, b) in enumerate(zip(quasi, base)):
    print(f"layer {l}: cos(q, s_next) {q:.3f}   cos(s, s_next) {b:.3f}")
print("mean gain", np.mean(np.array(quasi) - np.array(base)))
