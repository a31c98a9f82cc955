# %% [markdown]
# Two-lane decode-time model
#
# On-demand loading serializes every expert copy with compute. Prefetching
# hides each copy behind the previous layer's compute, so the best case
# saving per layer is min(copy, compute).

# %%
from __future__ import annotations

from expertspec import schedule

uniform = schedule.resolve_timing("uniform")
for sim in (schedule.simulate_on_demand, schedule.simulate_prefetch):
    r = sim(uniform)
    print(f"{r.mode:>9}: {r.tpot:7.1f} us/token  {r.breakdown.fractions()}")
print("closed-form saving", schedule.analytic_improvement(uniform), "us")

# %%
balanced = schedule.TimingModel.uniform(48, 2.5, 2.5, 5.0, 10.0)
print("copy == compute, analytic speedup", schedule.analytic_speedup(balanced))
print("simulated", schedule.simulate_on_demand(balanced).tpot / schedule.simulate_prefetch(balanced).tpot)

# %% [markdown]
# A large-model geometry: copies dominate on-demand decode time.

# %%
qwen = schedule.resolve_timing("qwen3-30b-a3b", k=8)
ond = schedule.simulate_on_demand(qwen)
print(f"t_copy per layer {qwen.t_copy[0]:.0f} us, compute {qwen.t_compute[0]:.0f} us")
print("on-demand breakdown", ond.breakdown.fractions())
