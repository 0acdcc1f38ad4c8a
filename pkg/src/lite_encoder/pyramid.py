"""Multi-scale feature pyramids and their flattened token view.

Levels are stored highest-level first: index 0 is the smallest map (largest
stride), the last index is the largest map. Flattening is level-major, then
row-major inside a level, so the high-level tokens always occupy a prefix of
the flattened token range.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "FeatureLevel",
    "FeaturePyramid",
    "TokenPartition",
    "ReferencePoint",
    "ReferencePoints",
    "build_pyramid",
    "downsample_half",
    "token_ratios",
    "split_tokens",
    "reference_points",
    "load_pyramid",
    "save_pyramid",
]


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class FeatureLevel:
    """One dense map of shape ``(height, width, d_model)`` at a given stride."""

    data: np.ndarray
    stride: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"level data must be 3-D (h, w, d), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"level dimensions must be positive, got {data.shape}")
        if not _is_power_of_two(int(self.stride)):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def d_model(self) -> int:
        return self.data.shape[2]

    @property
    def n_tokens(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple[FeatureLevel, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ValueError("a pyramid needs at least one level")
        d = levels[0].d_model
        if any(lv.d_model != d for lv in levels):
            raise ValueError("all levels must share d_model")
        strides = [lv.stride for lv in levels]
        if any(a <= b for a, b in zip(strides, strides[1:])):
            raise ValueError(
                f"strides must strictly decrease from the highest level to the lowest, got {strides}"
            )
        object.__setattr__(self, "levels", levels)

    @property
    def d_model(self) -> int:
        return self.levels[0].d_model

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(lv.height, lv.width) for lv in self.levels]

    @property
    def strides(self) -> list[int]:
        return [lv.stride for lv in self.levels]

    @property
    def level_sizes(self) -> list[int]:
        return [lv.n_tokens for lv in self.levels]

    @property
    def level_offsets(self) -> list[int]:
        """Start index of every level inside the flattened token matrix."""
        return [0, *np.cumsum(self.level_sizes)[:-1].tolist()]

    @property
    def n_tokens(self) -> int:
        return sum(self.level_sizes)

    def flatten(self) -> np.ndarray:
        return np.concatenate([lv.data.reshape(-1, self.d_model) for lv in self.levels])

    def with_tokens(self, tokens: np.ndarray) -> "FeaturePyramid":
        """New pyramid with the same geometry holding ``tokens`` (N x d_model)."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.shape != (self.n_tokens, self.d_model):
            raise ValueError(
                f"expected tokens of shape {(self.n_tokens, self.d_model)}, got {tokens.shape}"
            )
        levels = []
        for lv, start, size in zip(self.levels, self.level_offsets, self.level_sizes):
            chunk = tokens[start:start + size].reshape(lv.height, lv.width, self.d_model)
            levels.append(FeatureLevel(chunk.copy(), lv.stride))
        return FeaturePyramid(tuple(levels))

    def level_of_token(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_levels), self.level_sizes)


@dataclass(frozen=True)
class TokenPartition:
    """Split of the flattened tokens into high-level and low-level sets."""

    high_indices: np.ndarray
    low_indices: np.ndarray
    n_high_levels: int

    @property
    def n_high(self) -> int:
        return int(self.high_indices.size)

    @property
    def n_low(self) -> int:
        return int(self.low_indices.size)

    @property
    def n_tokens(self) -> int:
        return self.n_high + self.n_low

    def merge(self, high: np.ndarray, low: np.ndarray) -> np.ndarray:
        """Inverse of indexing with the two index maps."""
        out = np.empty((self.n_tokens, high.shape[1]), dtype=np.result_type(high, low))
        out[self.high_indices] = high
        out[self.low_indices] = low
        return out


@dataclass(frozen=True)
class ReferencePoint:
    x: float
    y: float
    level: int


@dataclass(frozen=True)
class ReferencePoints:
    """Normalized cell-centre coordinates of every token, in token order."""

    xy: np.ndarray
    level: np.ndarray

    def __len__(self) -> int:
        return len(self.level)

    def __iter__(self) -> Iterator[ReferencePoint]:
        for (x, y), lvl in zip(self.xy, self.level):
            yield ReferencePoint(float(x), float(y), int(lvl))

    def __getitem__(self, idx) -> "ReferencePoints":
        return ReferencePoints(self.xy[idx], self.level[idx])


def downsample_half(level: FeatureLevel) -> FeatureLevel:
    """Halve a level with 2x2 mean pooling; the stride doubles."""
    h, w, d = level.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample_half needs even dimensions, got {h}x{w}")
    pooled = level.data.reshape(h // 2, 2, w // 2, 2, d).mean(axis=(1, 3))
    return FeatureLevel(pooled, level.stride * 2)


def _level_dims(base_height: int, base_width: int, strides: Sequence[int]):
    strides = [int(s) for s in strides]
    if not strides:
        raise ValueError("need at least one stride")
    if any(a >= b for a, b in zip(strides, strides[1:])):
        raise ValueError(f"strides must be strictly increasing (lowest level first), got {strides}")
    for s in reversed(strides):
        if not _is_power_of_two(s):
            raise ValueError(f"stride {s} is not a power of two")
        if base_height % s or base_width % s:
            raise ValueError(
                f"input {base_height}x{base_width} is not divisible by stride {s}"
            )
    # storage order: highest level (largest stride) first
    return [(base_height // s, base_width // s, s) for s in reversed(strides)]


def build_pyramid(
    base_height: int,
    base_width: int,
    d_model: int,
    strides: Sequence[int] = (8, 16, 32, 64),
    seed: int | None = 0,
    fixture: str | Path | None = None,
) -> FeaturePyramid:
    """Synthetic stand-in for backbone features.

    ``strides`` are listed lowest level first (e.g. ``[8, 16, 32, 64]``).
    With ``fixture`` set the pyramid is loaded from disk and checked against the
    requested geometry; otherwise levels are drawn from a seeded normal
    generator. When the top stride is twice the one below it, the top level is
    produced by mean-pooling the level below, mimicking how S1 is derived from
    C5.
    """
    dims = _level_dims(base_height, base_width, strides)
    if fixture is not None:
        pyr = load_pyramid(fixture)
        got = [(lv.height, lv.width, lv.stride) for lv in pyr.levels]
        if got != dims or pyr.d_model != d_model:
            raise ValueError(f"fixture geometry {got} (d={pyr.d_model}) does not match {dims} (d={d_model})")
        return pyr

    rng = np.random.default_rng(seed)
    levels: list[FeatureLevel | None] = [None] * len(dims)
    derive_top = len(dims) > 1 and dims[0][2] == 2 * dims[1][2]
    for i in range(len(dims) - 1, -1, -1):
        h, w, s = dims[i]
        if i == 0 and derive_top:
            levels[0] = downsample_half(levels[1])
        else:
            levels[i] = FeatureLevel(rng.standard_normal((h, w, d_model)), s)
    return FeaturePyramid(tuple(levels))


def token_ratios(pyramid: FeaturePyramid) -> list[Fraction]:
    """Exact fraction of all tokens held by each level."""
    total = pyramid.n_tokens
    return [Fraction(n, total) for n in pyramid.level_sizes]


def split_tokens(pyramid: FeaturePyramid, n_high_levels: int) -> TokenPartition:
    if not 1 <= n_high_levels < pyramid.n_levels:
        raise ValueError(
            f"n_high_levels must be in [1, {pyramid.n_levels - 1}], got {n_high_levels}"
        )
    n_high = sum(pyramid.level_sizes[:n_high_levels])
    return TokenPartition(
        high_indices=np.arange(n_high),
        low_indices=np.arange(n_high, pyramid.n_tokens),
        n_high_levels=n_high_levels,
    )


def reference_points(pyramid: FeaturePyramid) -> ReferencePoints:
    xy, lvl = [], []
    for l, lv in enumerate(pyramid.levels):
        ii, jj = np.meshgrid(np.arange(lv.height), np.arange(lv.width), indexing="ij")
        pts = np.stack([(jj.ravel() + 0.5) / lv.width, (ii.ravel() + 0.5) / lv.height], axis=1)
        xy.append(pts)
        lvl.append(np.full(lv.n_tokens, l))
    return ReferencePoints(np.concatenate(xy), np.concatenate(lvl))


def pyramid_to_dict(pyramid: FeaturePyramid) -> dict:
    return {
        "d_model": pyramid.d_model,
        "levels": [
            {
                "height": lv.height,
                "width": lv.width,
                "stride": lv.stride,
                "data": lv.data.ravel().tolist(),
            }
            for lv in pyramid.levels
        ],
    }


def pyramid_from_dict(obj: dict) -> FeaturePyramid:
    d = int(obj["d_model"])
    levels = []
    for entry in obj["levels"]:
        h, w = int(entry["height"]), int(entry["width"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != h * w * d:
            raise ValueError(f"level {h}x{w} expects {h * w * d} values, got {data.size}")
        levels.append(FeatureLevel(data.reshape(h, w, d), int(entry["stride"])))
    return FeaturePyramid(tuple(levels))


def save_pyramid(pyramid: FeaturePyramid, path: str | Path) -> None:
    Path(path).write_text(json.dumps(pyramid_to_dict(pyramid)))


def load_pyramid(path: str | Path) -> FeaturePyramid:
    return pyramid_from_dict(json.loads(Path(path).read_text()))


def ceil_level_dims(base_height: int, base_width: int, strides: Sequence[int]) -> list[tuple[int, int]]:
    """Per-level (h, w), highest level first, using ceil division as a padded backbone would."""
    return [(math.ceil(base_height / s), math.ceil(base_width / s)) for s in sorted(strides, reverse=True)]
