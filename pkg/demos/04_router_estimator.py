# %% [markdown]
# Distilling a small router estimator
#
# A shared MLP maps the predicted router input to next-layer router
# logits, trained with forward KL against the true gate.

# %%
from __future__ import annotations

from expertspec import estimator as est
from expertspec.model import build_model, preset
from expertspec.speculation import accumulate_default_vectors
from expertspec.trace import random_tokens, record_trace

model = build_model(preset("toy"))
c = model.config
trace = record_trace(model, random_tokens(c.vocab, 4000, seed=4))
table = accumulate_default_vectors(trace)

# %%
data = est.build_distill_data(trace, "quasi", table, model)
cfg = est.EstimatorConfig(c.H, c.E, c.L - 1)
print("estimator parameters:", cfg.param_count())
res = est.train_estimator(data, cfg, c.k, lr=3e-3, batch=256, steps=600, eval_every=100)
for tokens, kl, hit in res.curve:
    print(f"{tokens:>7} tokens  val KL {kl:.4f}  val recall@k {hit:.3f}")
