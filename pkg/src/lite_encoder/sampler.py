"""Bilinear sampling of feature maps at continuous locations.

Coordinates are in level-pixel units with cell ``(i, j)`` centred at
``(j + 0.5, i + 0.5)``. Neighbours outside the map contribute zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pyramid import FeatureLevel, FeaturePyramid

__all__ = [
    "SampleLocation",
    "bilinear_terms",
    "gather",
    "bilinear_sample",
    "sample_batch",
    "bilinear_backward",
]


@dataclass(frozen=True)
class SampleLocation:
    x: float
    y: float
    level: int


def bilinear_terms(height: int, width: int, x, y):
    """Corner indices, weights and weight derivatives for points ``(x, y)``.

    Returns ``(idx, w, dw_dx, dw_dy)``, each of shape ``x.shape + (4,)``.
    ``idx`` holds flat ``i * width + j`` indices (clipped into range so they
    can be used for gathering); corners off the map get zero weight and zero
    derivative. Corner order is (i0, j0), (i0, j0+1), (i0+1, j0), (i0+1, j0+1).

    The floor convention makes the derivative one-sided (from the right) when
    a coordinate sits exactly on a cell-centre line.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u = x - 0.5
    v = y - 0.5
    j0 = np.floor(u)
    i0 = np.floor(v)
    fx = u - j0
    fy = v - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)

    ci = np.stack([i0, i0, i0 + 1, i0 + 1], axis=-1)
    cj = np.stack([j0, j0 + 1, j0, j0 + 1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    dwx = np.stack([-(1 - fy), 1 - fy, -fy, fy], axis=-1)
    dwy = np.stack([-(1 - fx), -fx, 1 - fx, fx], axis=-1)

    inside = (ci >= 0) & (ci < height) & (cj >= 0) & (cj < width)
    idx = np.clip(ci, 0, height - 1) * width + np.clip(cj, 0, width - 1)
    w = np.where(inside, w, 0.0)
    dwx = np.where(inside, dwx, 0.0)
    dwy = np.where(inside, dwy, 0.0)
    return idx, w, dwx, dwy


def gather(flat_map: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted 4-corner gather from a ``(h*w, C)`` map; returns ``idx.shape[:-1] + (C,)``."""
    corners = flat_map[idx]  # (..., 4, C)
    return np.einsum("...c,...cd->...d", w, corners)


def bilinear_sample(level: FeatureLevel, x: float, y: float) -> np.ndarray:
    idx, w, _, _ = bilinear_terms(level.height, level.width, x, y)
    return gather(level.data.reshape(-1, level.d_model), idx, w)


def _as_location_arrays(locations) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(locations, tuple) and len(locations) == 2:
        xy, lvl = locations
        return np.asarray(xy, dtype=np.float64).reshape(-1, 2), np.asarray(lvl, dtype=np.int64)
    xy = np.array([[loc.x, loc.y] for loc in locations], dtype=np.float64).reshape(-1, 2)
    lvl = np.array([loc.level for loc in locations], dtype=np.int64)
    return xy, lvl


def sample_batch(pyramid: FeaturePyramid, locations: Sequence[SampleLocation] | tuple) -> np.ndarray:
    """Sample many locations; accepts SampleLocation objects or an ``(xy, levels)`` pair."""
    xy, lvl = _as_location_arrays(locations)
    if lvl.size and (lvl.min() < 0 or lvl.max() >= pyramid.n_levels):
        bad = lvl[(lvl < 0) | (lvl >= pyramid.n_levels)][0]
        raise IndexError(f"level index {bad} out of range for a {pyramid.n_levels}-level pyramid")
    out = np.zeros((len(lvl), pyramid.d_model))
    for l, level in enumerate(pyramid.levels):
        sel = lvl == l
        if not sel.any():
            continue
        idx, w, _, _ = bilinear_terms(level.height, level.width, xy[sel, 0], xy[sel, 1])
        out[sel] = gather(level.data.reshape(-1, level.d_model), idx, w)
    return out


def bilinear_backward(level: FeatureLevel, x: float, y: float, upstream):
    """Gradients of ``upstream . bilinear_sample(level, x, y)``.

    Returns ``(grad_features, grad_x, grad_y)`` where ``grad_features`` maps
    each touched ``(i, j)`` cell to its gradient vector. Off-map corners are
    omitted.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    idx, w, dwx, dwy = bilinear_terms(level.height, level.width, x, y)
    flat = level.data.reshape(-1, level.d_model)
    corners = flat[idx]  # (4, d)
    proj = corners @ upstream
    grad_x = float(dwx @ proj)
    grad_y = float(dwy @ proj)
    grad_features: dict[tuple[int, int], np.ndarray] = {}
    for k in range(4):
        if w[k] == 0.0 and dwx[k] == 0.0 and dwy[k] == 0.0:
            continue
        cell = divmod(int(idx[k]), level.width)
        grad_features[cell] = grad_features.get(cell, 0.0) + w[k] * upstream
    return grad_features, grad_x, grad_y
