# %% [markdown]
# # Where the tokens are
#
# A four-scale pyramid with strides 8, 16, 32 and 64 puts three quarters of
# its tokens in the finest map. The encoder only lets the coarse maps act as
# queries most of the time, so the share of coarse tokens sets the budget.

# %%
from fractions import Fraction

from lite_encoder import build_pyramid, split_tokens, token_ratios

pyr = build_pyramid(512, 512, d_model=8, strides=[8, 16, 32, 64], seed=0)
for stride, shape, r in zip(pyr.strides, pyr.shapes, token_ratios(pyr)):
    print(f"stride {stride:>2}  {shape[0]:>2}x{shape[1]:<2}  {str(r):>5}  {100 * float(r):5.2f}%")

# %% [markdown]
# Treating the top two or three maps as high level fixes which tokens get
# refreshed every layer.

# %%
for n_high in (2, 3):
    part = split_tokens(pyr, n_high)
    kept = Fraction(part.n_high, pyr.n_tokens)
    print(f"H={n_high}: {part.n_high} of {pyr.n_tokens} tokens query ({kept}), "
          f"{100 * float(1 - kept):.1f}% fewer queries")

# %% [markdown]
# High tokens are always a prefix of the flattened order because levels are
# stored coarse to fine.

# %%
part = split_tokens(pyr, 3)
print(part.high_indices[:3], part.high_indices[-1], part.low_indices[0])
