# %% [markdown]
# Measured overlap with a real copy thread
#
# Expert weights are streamed into a two-slot buffer pool by a background
# thread that sleeps for the injected transfer latency. Prefetch mode
# starts layer l+1's copy as soon as layer l has a prediction.

# %%
from __future__ import annotations

from expertspec.executor import run_offloaded_decode
from expertspec.model import build_model, generate, preset
from expertspec.schedule import check_copy_serialization, max_resident_layers
from expertspec.speculation import RouterPF, accumulate_default_vectors
from expertspec.trace import random_tokens, record_trace

model = build_model(preset("toy"))
table = accumulate_default_vectors(record_trace(model, random_tokens(256, 1000, seed=3)))
prompt = list(b"The ")

# %%
ond = run_offloaded_decode(model, prompt, 16, None, latency_us=5000, mode="on_demand")
pf = run_offloaded_decode(model, prompt, 16, RouterPF(table), latency_us=5000, mode="prefetch")
for run in (ond, pf):
    check_copy_serialization(run.events)
    print(f"{run.mode:>9}: {run.mean_tpot_us / 1e3:6.2f} ms/token, peak resident layers {max_resident_layers(run.residency)}")

# %%
print("on-demand tokens match resident decode:", ond.tokens == generate(model, prompt, 16))
print("prefetch tokens match in-memory speculation:", pf.tokens == generate(model, prompt, 16, predictor=RouterPF(table)))
