"""Multi-scale deformable attention and key-aware deformable attention (KDA).

Both kinds share the sampling machinery: every query predicts ``2*M*L*K``
offsets from its features, which displace its reference point on each level.
Values (and, for KDA, keys) are bilinearly sampled there and projected.
The kinds differ only in how slot weights are produced:

* deformable: a linear head on the query, softmax per head over its ``L*K`` slots;
* KDA: scaled dot product between the query's head slice and the sampled keys.

Matrices act on row vectors (``x @ W``). Offset columns are laid out as
(head, level, point, xy); projected channels are head-major.

Sampling then projecting equals projecting then sampling (bilinear
interpolation is linear in the features), so the projection is applied once
to the source maps and only the head's channels are gathered. Biases are
added after sampling, which keeps the two forms identical even near borders.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .errors import NumericalError
from .pyramid import FeaturePyramid, ReferencePoints
from .sampler import bilinear_terms

__all__ = [
    "KINDS",
    "AttentionHyper",
    "AttentionParams",
    "SamplingField",
    "AttentionCache",
    "init_params",
    "resolve_locations",
    "deform_attn",
    "kda_attn",
    "attention_forward",
    "attend",
    "attn_backward",
]

KINDS = ("deformable", "kda")


@dataclass(frozen=True)
class AttentionHyper:
    m_heads: int = 8
    k_points: int = 4
    n_levels: int = 4
    d_model: int = 256

    def __post_init__(self):
        for name in ("m_heads", "k_points", "n_levels", "d_model"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.m_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by m_heads={self.m_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.m_heads

    @property
    def n_slots(self) -> int:
        """Slots per head, L*K."""
        return self.n_levels * self.k_points

    @property
    def n_v(self) -> int:
        return self.m_heads * self.n_levels * self.k_points


@dataclass(frozen=True)
class AttentionParams:
    kind: str
    W_p: np.ndarray
    b_p: np.ndarray
    W_V: np.ndarray
    b_V: np.ndarray
    W_O: np.ndarray
    b_O: np.ndarray
    W_A: np.ndarray | None = None
    b_A: np.ndarray | None = None
    W_K: np.ndarray | None = None
    b_K: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        need = ("W_A", "b_A") if self.kind == "deformable" else ("W_K", "b_K")
        for name in need:
            if getattr(self, name) is None:
                raise ValueError(f"{self.kind} attention needs {name}")

    def names(self) -> list[str]:
        return [f.name for f in fields(self) if f.name != "kind" and getattr(self, f.name) is not None]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    def replace(self, **changes) -> "AttentionParams":
        return replace(self, **changes)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def check_shapes(self, hyper: AttentionHyper) -> None:
        d = hyper.d_model
        expected = {
            "W_p": (d, 2 * hyper.n_v), "b_p": (2 * hyper.n_v,),
            "W_A": (d, hyper.n_v), "b_A": (hyper.n_v,),
            "W_V": (d, d), "b_V": (d,),
            "W_K": (d, d), "b_K": (d,),
            "W_O": (d, d), "b_O": (d,),
        }
        for name, arr in self.arrays().items():
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")

    def to_dict(self, hyper: AttentionHyper) -> dict:
        out = {
            "kind": self.kind,
            "hyper": {
                "m_heads": hyper.m_heads,
                "k_points": hyper.k_points,
                "n_levels": hyper.n_levels,
                "d_model": hyper.d_model,
            },
        }
        for name, arr in self.arrays().items():
            out[name] = arr.tolist()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> tuple["AttentionParams", AttentionHyper]:
        hyper = AttentionHyper(**obj["hyper"])
        arrays = {
            name: np.asarray(obj[name], dtype=np.float64)
            for name in ("W_p", "b_p", "W_V", "b_V", "W_O", "b_O", "W_A", "b_A", "W_K", "b_K")
            if name in obj
        }
        params = cls(kind=obj["kind"], **arrays)
        params.check_shapes(hyper)
        return params, hyper

    def dumps(self, hyper: AttentionHyper) -> str:
        return json.dumps(self.to_dict(hyper), sort_keys=True)


@dataclass
class SamplingField:
    """Per (query, head, level, point) offsets and absolute locations, plus slot weights.

    ``weights`` is filled in by the attention forward pass; its last two axes
    are (level, point) and it sums to one over them.
    """

    offsets: np.ndarray
    locations: np.ndarray
    weights: np.ndarray | None = None

    @property
    def n_queries(self) -> int:
        return self.offsets.shape[0]


@dataclass
class AttentionCache:
    kind: str
    queries: np.ndarray
    field: SamplingField
    levels: list[np.ndarray]
    params: AttentionParams
    hyper: AttentionHyper
    values: np.ndarray
    keys: np.ndarray | None
    concat: np.ndarray
    sources: dict = field(repr=False)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_finite(**arrays) -> None:
    for name, arr in arrays.items():
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in {name}")


def init_params(hyper: AttentionHyper, seed: int = 0, kind: str = "deformable") -> AttentionParams:
    """Deterministic initialization.

    Offset head: zero weights, bias pointing head ``h`` along angle
    ``2*pi*h/M`` with radius ``k+1`` for point ``k`` on every level. The
    deformable weight head starts at zero (uniform attention). Projections
    are uniform in ``+-1/sqrt(d_model)``; projection biases are zero.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown attention kind {kind!r}")
    rng = np.random.default_rng(seed)
    d, M, L, K = hyper.d_model, hyper.m_heads, hyper.n_levels, hyper.k_points
    bound = 1.0 / math.sqrt(d)

    theta = 2 * math.pi * np.arange(M) / M
    grid = np.stack([np.cos(theta), np.sin(theta)], axis=-1)  # (M, 2)
    radius = np.arange(1, K + 1, dtype=np.float64)
    b_p = grid[:, None, None, :] * radius[None, None, :, None] * np.ones((1, L, 1, 1))

    def proj():
        return rng.uniform(-bound, bound, size=(d, d))

    W_V = proj()
    W_O = proj()
    extra = {}
    if kind == "deformable":
        extra = {"W_A": np.zeros((d, hyper.n_v)), "b_A": np.zeros(hyper.n_v)}
    else:
        extra = {"W_K": proj(), "b_K": np.zeros(d)}
    return AttentionParams(
        kind=kind,
        W_p=np.zeros((d, 2 * hyper.n_v)),
        b_p=b_p.reshape(-1),
        W_V=W_V,
        b_V=np.zeros(d),
        W_O=W_O,
        b_O=np.zeros(d),
        **extra,
    )


def _level_arrays(pyramid) -> list[np.ndarray]:
    if isinstance(pyramid, FeaturePyramid):
        return [lv.data for lv in pyramid.levels]
    return [np.asarray(a, dtype=np.float64) for a in pyramid]


def _ref_array(refs) -> np.ndarray:
    if isinstance(refs, ReferencePoints):
        return refs.xy
    return np.asarray(refs, dtype=np.float64).reshape(-1, 2)


def resolve_locations(
    queries: np.ndarray,
    refs,
    params: AttentionParams,
    hyper: AttentionHyper,
    level_shapes: Sequence[tuple[int, int]],
) -> SamplingField:
    queries = np.asarray(queries, dtype=np.float64)
    ref_xy = _ref_array(refs)
    if queries.ndim != 2 or queries.shape[1] != hyper.d_model:
        raise ValueError(f"queries must be (n, {hyper.d_model}), got {queries.shape}")
    if len(ref_xy) != len(queries):
        raise ValueError(f"{len(queries)} queries but {len(ref_xy)} reference points")
    if len(level_shapes) != hyper.n_levels:
        raise ValueError(f"hyper expects {hyper.n_levels} levels, got {len(level_shapes)}")
    n = len(queries)
    M, L, K = hyper.m_heads, hyper.n_levels, hyper.k_points
    offsets = (queries @ params.W_p + params.b_p).reshape(n, M, L, K, 2)
    scale = np.array([[w, h] for h, w in level_shapes], dtype=np.float64)  # (L, 2) as (x, y)
    base = ref_xy[:, None, None, None, :] * scale[None, None, :, None, :]
    return SamplingField(offsets=offsets, locations=base + offsets)


def _project_sources(levels: list[np.ndarray], params: AttentionParams, hyper: AttentionHyper) -> dict:
    M, dh = hyper.m_heads, hyper.d_head
    out = {"V": [(a.reshape(-1, hyper.d_model) @ params.W_V).reshape(-1, M, dh) for a in levels]}
    if params.kind == "kda":
        out["K"] = [(a.reshape(-1, hyper.d_model) @ params.W_K).reshape(-1, M, dh) for a in levels]
    return out


def _sample_heads(sources: list[np.ndarray], shapes, locations: np.ndarray, hyper: AttentionHyper):
    """Gather per-head channels at every slot: returns (n, M, L*K, d_head)."""
    n, M, L, K, _ = locations.shape
    head_ix = np.arange(M)[None, :, None, None]
    per_level = []
    for l, (h, w) in enumerate(shapes):
        idx, wts, _, _ = bilinear_terms(h, w, locations[:, :, l, :, 0], locations[:, :, l, :, 1])
        corners = sources[l][idx, head_ix]  # (n, M, K, 4, dh)
        per_level.append(np.einsum("qmkc,qmkcd->qmkd", wts, corners))
    return np.stack(per_level, axis=2).reshape(n, M, L * K, hyper.d_head)


def _forward(kind, queries, field_, levels, params, hyper, sources=None):
    n = len(queries)
    M, dh = hyper.m_heads, hyper.d_head
    shapes = [a.shape[:2] for a in levels]
    if sources is None:
        sources = _project_sources(levels, params, hyper)
    values = _sample_heads(sources["V"], shapes, field_.locations, hyper) + params.b_V.reshape(1, M, 1, dh)
    keys = None
    if kind == "deformable":
        logits = (queries @ params.W_A + params.b_A).reshape(n, M, hyper.n_slots)
    else:
        keys = _sample_heads(sources["K"], shapes, field_.locations, hyper) + params.b_K.reshape(1, M, 1, dh)
        q_heads = queries.reshape(n, M, dh)
        logits = np.einsum("qmd,qmsd->qms", q_heads, keys) / math.sqrt(dh)
    weights = _softmax(logits)
    heads = np.einsum("qms,qmsd->qmd", weights, values)
    concat = heads.reshape(n, hyper.d_model)
    out = concat @ params.W_O + params.b_O
    field_.weights = weights.reshape(n, M, hyper.n_levels, hyper.k_points)
    cache = AttentionCache(kind, queries, field_, levels, params, hyper, values, keys, concat, sources)
    return out, cache


def _validate(kind, queries, pyramid, params, hyper):
    if params.kind != kind:
        raise ValueError(f"{kind} attention called with {params.kind} parameters")
    levels = _level_arrays(pyramid)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != hyper.d_model:
        raise ValueError(f"queries must be (n, {hyper.d_model}), got {queries.shape}")
    if len(levels) != hyper.n_levels:
        raise ValueError(f"hyper expects {hyper.n_levels} levels, got {len(levels)}")
    params.check_shapes(hyper)
    _check_finite(queries=queries, **{f"level {i}": a for i, a in enumerate(levels)}, **params.arrays())
    return queries, levels


def deform_attn(queries, field_: SamplingField, pyramid, params: AttentionParams, hyper: AttentionHyper) -> np.ndarray:
    queries, levels = _validate("deformable", queries, pyramid, params, hyper)
    return _forward("deformable", queries, field_, levels, params, hyper)[0]


def kda_attn(queries, field_: SamplingField, pyramid, params: AttentionParams, hyper: AttentionHyper) -> np.ndarray:
    queries, levels = _validate("kda", queries, pyramid, params, hyper)
    return _forward("kda", queries, field_, levels, params, hyper)[0]


def attention_forward(queries, refs, pyramid, params: AttentionParams, hyper: AttentionHyper):
    """Full forward pass (offsets, sampling, weights, output) keeping a cache for ``attn_backward``."""
    queries, levels = _validate(params.kind, queries, pyramid, params, hyper)
    shapes = [a.shape[:2] for a in levels]
    field_ = resolve_locations(queries, refs, params, hyper, shapes)
    return _forward(params.kind, queries, field_, levels, params, hyper)


def attend(queries, refs, pyramid, params: AttentionParams, hyper: AttentionHyper,
           threads: int = 1, chunk_size: int = 256) -> tuple[np.ndarray, SamplingField]:
    """Forward pass without a backward cache, split over fixed query chunks.

    Chunk boundaries depend only on ``chunk_size``, never on ``threads``, so
    results are bit-identical for any thread count.
    """
    queries, levels = _validate(params.kind, queries, pyramid, params, hyper)
    ref_xy = _ref_array(refs)
    shapes = [a.shape[:2] for a in levels]
    sources = _project_sources(levels, params, hyper)
    bounds = [(s, min(s + chunk_size, len(queries))) for s in range(0, len(queries), chunk_size)]

    def run(bound):
        s, e = bound
        f = resolve_locations(queries[s:e], ref_xy[s:e], params, hyper, shapes)
        out, _ = _forward(params.kind, queries[s:e], f, levels, params, hyper, sources)
        return out, f

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    if not parts:
        n = 0
        M, L, K = hyper.m_heads, hyper.n_levels, hyper.k_points
        empty = np.zeros((n, M, L, K, 2))
        return np.zeros((0, hyper.d_model)), SamplingField(empty, empty.copy(), np.zeros((n, M, L, K)))
    out = np.concatenate([p[0] for p in parts])
    merged = SamplingField(
        offsets=np.concatenate([p[1].offsets for p in parts]),
        locations=np.concatenate([p[1].locations for p in parts]),
        weights=np.concatenate([p[1].weights for p in parts]),
    )
    return out, merged


def _scatter_level(src, shapes, locations, grad_slots, hyper):
    """Backprop sampled per-head slots into source maps and sampling locations.

    ``grad_slots`` is (n, M, L*K, d_head). Returns per-level map gradients of
    shape (h*w, M, d_head) and the location gradient (n, M, L, K, 2).
    """
    n, M, L, K, _ = locations.shape
    g = grad_slots.reshape(n, M, L, K, hyper.d_head)
    head_ix = np.arange(M)[None, :, None, None]
    g_maps = []
    g_loc = np.zeros_like(locations)
    for l, (h, w) in enumerate(shapes):
        idx, wts, dwx, dwy = bilinear_terms(h, w, locations[:, :, l, :, 0], locations[:, :, l, :, 1])
        g_l = g[:, :, l]  # (n, M, K, dh)
        g_map = np.zeros((h * w, M, hyper.d_head))
        np.add.at(g_map, (idx, np.broadcast_to(head_ix, idx.shape)), wts[..., None] * g_l[:, :, :, None, :])
        g_maps.append(g_map)
        corners = src[l][idx, head_ix]  # (n, M, K, 4, dh)
        proj = np.einsum("qmkcd,qmkd->qmkc", corners, g_l)
        g_loc[:, :, l, :, 0] = np.einsum("qmkc,qmkc->qmk", dwx, proj)
        g_loc[:, :, l, :, 1] = np.einsum("qmkc,qmkc->qmk", dwy, proj)
    return g_maps, g_loc


def attn_backward(cache: AttentionCache | None, grad_out: np.ndarray) -> dict:
    """Reverse-mode gradients of ``sum(grad_out * output)``.

    Returns a dict with ``"queries"``, ``"levels"`` (one array per source
    level) and one entry per parameter matrix. Gradients flow through the
    sampling locations into the offset head.
    """
    if cache is None:
        raise ValueError("attn_backward needs the cache returned by attention_forward")
    p, hyper = cache.params, cache.hyper
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n, d = cache.queries.shape
    M, dh, S = hyper.m_heads, hyper.d_head, hyper.n_slots
    Q = cache.queries
    weights = cache.field.weights.reshape(n, M, S)
    shapes = [a.shape[:2] for a in cache.levels]

    grads: dict = {}
    grads["W_O"] = cache.concat.T @ grad_out
    grads["b_O"] = grad_out.sum(axis=0)
    g_heads = (grad_out @ p.W_O.T).reshape(n, M, dh)

    g_w = np.einsum("qmd,qmsd->qms", g_heads, cache.values)
    g_values = weights[..., None] * g_heads[:, :, None, :]
    g_logits = weights * (g_w - (weights * g_w).sum(axis=-1, keepdims=True))

    g_Q = np.zeros_like(Q)
    if cache.kind == "deformable":
        g_flat = g_logits.reshape(n, M * S)
        grads["W_A"] = Q.T @ g_flat
        grads["b_A"] = g_flat.sum(axis=0)
        g_Q += g_flat @ p.W_A.T
        g_keys = None
    else:
        scale = 1.0 / math.sqrt(dh)
        g_Q += (np.einsum("qms,qmsd->qmd", g_logits, cache.keys) * scale).reshape(n, d)
        g_keys = g_logits[..., None] * Q.reshape(n, M, dh)[:, :, None, :] * scale

    grads["b_V"] = g_values.sum(axis=(0, 2)).reshape(d)
    g_maps_V, g_loc = _scatter_level(cache.sources["V"], shapes, cache.field.locations, g_values, hyper)
    level_flat = [a.reshape(-1, d) for a in cache.levels]
    grads["W_V"] = sum(x.T @ g.reshape(-1, d) for x, g in zip(level_flat, g_maps_V))
    g_levels = [g.reshape(-1, d) @ p.W_V.T for g in g_maps_V]

    if g_keys is not None:
        grads["b_K"] = g_keys.sum(axis=(0, 2)).reshape(d)
        g_maps_K, g_loc_K = _scatter_level(cache.sources["K"], shapes, cache.field.locations, g_keys, hyper)
        g_loc = g_loc + g_loc_K
        grads["W_K"] = sum(x.T @ g.reshape(-1, d) for x, g in zip(level_flat, g_maps_K))
        g_levels = [gl + g.reshape(-1, d) @ p.W_K.T for gl, g in zip(g_levels, g_maps_K)]

    # locations = scaled reference + offsets, references are constants
    g_off = g_loc.reshape(n, -1)
    grads["W_p"] = Q.T @ g_off
    grads["b_p"] = g_off.sum(axis=0)
    g_Q += g_off @ p.W_p.T

    grads["queries"] = g_Q
    grads["levels"] = [g.reshape(a.shape) for g, a in zip(g_levels, cache.levels)]
    return grads
