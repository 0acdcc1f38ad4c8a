# %% [markdown]
# # Sampling between cells
#
# Feature cells sit at half-integer coordinates in level-pixel units. A
# sample at (x, y) blends the four surrounding cells, and cells outside the
# map count as zero.

# %%
import numpy as np

from lite_encoder import FeatureLevel, bilinear_sample
from lite_encoder.sampler import bilinear_backward

grid = np.arange(12, dtype=float).reshape(3, 4, 1)
level = FeatureLevel(grid, stride=8)
print(grid[:, :, 0])

# %%
for x, y in [(1.5, 0.5), (2.0, 0.5), (2.0, 1.0), (0.0, 1.5), (-1.0, 0.5)]:
    print(f"({x:4.1f}, {y:3.1f}) -> {bilinear_sample(level, x, y)[0]:.2f}")

# %% [markdown]
# The map is linear in its cells, so the gradient with respect to cells is
# the interpolation weights, and the coordinate gradient is the local slope.

# %%
cells, gx, gy = bilinear_backward(level, 1.2, 0.9, np.ones(1))
print({k: round(float(v[0]), 3) for k, v in cells.items()})
print("d/dx", gx, "d/dy", gy)  # slope 1 along x, 4 along y
