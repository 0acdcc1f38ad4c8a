# %% [markdown]
# # What the schedule saves
#
# Analytic FLOP counts at an 800x1216 input, compared against six all-token
# deformable layers. Only the ratios are meaningful: absolute counts depend on
# how nonlinearities and biases are charged.

# %%
from lite_encoder import baseline_report, variant_sweep

variants = ["H2L2-(2+1)x3", "H3L1-(6+1)x1", "H3L1-(3+1)x2", "H3L1-(2+1)x3"]
base = baseline_report()
print(f"baseline {base.total_flops / 1e9:.1f} GFLOPs")
for kind in ("kda", "deformable"):
    for r in variant_sweep(variants, attn_kind=kind):
        print(f"{kind:<10} {r.variant:<14} {r.total_flops / 1e9:6.1f} GFLOPs  "
              f"-{100 * r.reduction_fraction:.0f}%")

# %% [markdown]
# Per-stage breakdown of one variant. Low-level stages are cheap in the FFN
# because its hidden size is divided by lambda.

# %%
(rep,) = variant_sweep(["H3L1-(2+1)x1"])
for s in rep.stages:
    parts = ", ".join(f"{k} {v / 1e9:.2f}" for k, v in s["flops"].items())
    print(f"{s['kind']:<4} {s['n_queries']:>6}  {parts}")
