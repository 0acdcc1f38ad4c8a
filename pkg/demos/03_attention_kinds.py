# %% [markdown]
# # Two ways to weight sampled points
#
# Both attention kinds predict sampling offsets from the query. Deformable
# attention also predicts the weights from the query alone. Key-aware
# attention samples keys at the same points and scores them against the query
# with a scaled dot product, so the weights depend on what was sampled.

# %%
import numpy as np

from lite_encoder import AttentionHyper, build_pyramid, init_params
from lite_encoder.attention import attention_forward

hyper = AttentionHyper(m_heads=2, k_points=3, n_levels=2, d_model=8)
pyr = build_pyramid(64, 64, 8, strides=[16, 32], seed=1)
levels = [lv.data for lv in pyr.levels]
rng = np.random.default_rng(0)
queries = rng.standard_normal((4, 8))
refs = rng.uniform(0.2, 0.8, (4, 2))

# %% [markdown]
# A freshly initialized deformable layer has a zero weight head, so every
# slot gets 1/(L*K).

# %%
for kind in ("deformable", "kda"):
    params = init_params(hyper, seed=0, kind=kind)
    out, cache = attention_forward(queries, refs, levels, params, hyper)
    w = cache.field.weights[0, 0]
    print(kind, "weights of query 0, head 0:\n", np.round(w, 3))
    print("sum per head:", cache.field.weights.sum(axis=(2, 3))[0])

# %% [markdown]
# Scaling the features changes key-aware weights but leaves deformable
# weights alone.

# %%
for kind in ("deformable", "kda"):
    params = init_params(hyper, seed=0, kind=kind)
    _, a = attention_forward(queries, refs, levels, params, hyper)
    _, b = attention_forward(queries, refs, [3 * lv for lv in levels], params, hyper)
    print(kind, "max weight change:", float(np.abs(a.field.weights - b.field.weights).max()))
