# %% [markdown]
# # Where the low-level layer looks
#
# Capture the sampling field of one layer and list its heaviest slots,
# overall and per level. This is the data behind a top-k scatter plot.

# %%
from collections import Counter

from lite_encoder import AttentionHyper, build_pyramid, parse_variant, run_encoder
from lite_encoder.cli import topk_locations

config = parse_variant("H3L1-(2+1)x1", ffn_hidden_high=64)
pyr = build_pyramid(128, 128, 16, seed=3)
hyper = AttentionHyper(m_heads=2, k_points=4, n_levels=4, d_model=16)
result = run_encoder(pyr, config, hyper=hyper, capture_layers=[2], trace=False, threads=1)
top = topk_locations(result.captures[2], k_top=100)

# %%
for e in top["top"][:5]:
    print(f"query {e['query_index']:>4} head {e['head']} level {e['level']} "
          f"({e['x']:6.2f}, {e['y']:6.2f}) w={e['weight']:.3f}")
print("levels among top 100:", sorted(Counter(e["level"] for e in top["top"]).items()))
