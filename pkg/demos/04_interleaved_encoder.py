# %% [markdown]
# # Running the interleaved schedule
#
# `H3L1-(2+1)x3` means three coarse levels are high level, one fine level is
# low level, and each of three blocks runs two high-level layers followed by
# one low-level layer.

# %%
import numpy as np

from lite_encoder import AttentionHyper, build_pyramid, parse_variant, run_encoder

config = parse_variant("H3L1-(2+1)x3", ffn_hidden_high=64)
pyr = build_pyramid(256, 256, 16, seed=0)
hyper = AttentionHyper(m_heads=2, k_points=2, n_levels=4, d_model=16)
result = run_encoder(pyr, config, hyper=hyper, keep_states=True, threads=1)

for stage in result.trace:
    sums = " ".join(c[:6] for c in stage["token_checksums"])
    print(f"{stage['stage_index']} {stage['kind']:<4} {stage['n_queries']:>5} queries  {sums}")

# %% [markdown]
# The fine level keeps its checksum through the high-level layers and changes
# only in the low-level layer; the coarse levels do the opposite.

# %%
part = result.states[0].partition
for before, after, kind in zip(result.states, result.states[1:], config.stage_kinds()):
    moved = [not np.array_equal(before.tokens[i], after.tokens[i])
             for i in (part.high_indices, part.low_indices)]
    print(kind, "high changed:", moved[0], " low changed:", moved[1])

print("output shapes", result.pyramid.shapes == pyr.shapes)
