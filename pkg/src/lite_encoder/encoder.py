"""Interleaved multi-scale encoder.

Each block runs ``A`` high-level layers, where only the high-level tokens act
as queries but attend to the whole pyramid, then one low-level layer where
the low-level tokens query the updated pyramid. Tokens that are not queries
in a stage are carried over untouched. The low-level layer uses a FFN whose
hidden size is divided by ``lambda``.

Layers are post-norm: ``x -> attn -> add -> norm -> ffn -> add -> norm``.
"""
from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import (
    KINDS,
    AttentionHyper,
    AttentionParams,
    SamplingField,
    attend,
    attention_forward,
    attn_backward,
    init_params,
)
from .errors import VariantParseError
from .pyramid import FeaturePyramid, ReferencePoints, TokenPartition, reference_points, split_tokens

__all__ = [
    "ScheduleConfig",
    "EncoderLayerParams",
    "EncoderState",
    "EncoderResult",
    "parse_variant",
    "init_layer_params",
    "init_encoder_params",
    "layer_norm",
    "layer_forward",
    "layer_backward",
    "high_level_layer",
    "low_level_layer",
    "run_encoder",
    "resolve_threads",
    "level_checksums",
]

NORM_EPS = 1e-5
THREADS_ENV = "LITE_ENCODER_THREADS"


@dataclass(frozen=True)
class ScheduleConfig:
    h_levels: int
    l_levels: int
    a_high_updates: int
    b_blocks: int
    attn_kind: str = "kda"
    ffn_hidden_high: int = 1024
    ffn_lambda: int = 8

    def __post_init__(self):
        if self.h_levels < 1 or self.l_levels < 1:
            raise ValueError("need at least one high-level and one low-level scale")
        if self.a_high_updates < 1:
            raise ValueError(f"A must be >= 1, got {self.a_high_updates}")
        if self.b_blocks < 1:
            raise ValueError(f"B must be >= 1, got {self.b_blocks}")
        if self.ffn_lambda < 1:
            raise ValueError(f"lambda must be >= 1, got {self.ffn_lambda}")
        if self.attn_kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.attn_kind!r}")
        if self.ffn_hidden_low < 1:
            raise ValueError(
                f"ffn_hidden_high={self.ffn_hidden_high} / lambda={self.ffn_lambda} leaves no hidden units"
            )

    @property
    def n_levels(self) -> int:
        return self.h_levels + self.l_levels

    @property
    def n_layers(self) -> int:
        return (self.a_high_updates + 1) * self.b_blocks

    @property
    def ffn_hidden_low(self) -> int:
        return self.ffn_hidden_high // self.ffn_lambda

    @property
    def variant(self) -> str:
        return f"H{self.h_levels}L{self.l_levels}-({self.a_high_updates}+1)x{self.b_blocks}"

    def stage_kinds(self) -> list[str]:
        return (["high"] * self.a_high_updates + ["low"]) * self.b_blocks

    def hidden_for(self, kind: str) -> int:
        return self.ffn_hidden_high if kind == "high" else self.ffn_hidden_low


def parse_variant(text: str, attn_kind: str = "kda", ffn_hidden_high: int = 1024,
                  ffn_lambda: int = 8) -> ScheduleConfig:
    """Parse ``H<h>L<l>-(<A>+1)x<B>``; ``×`` is accepted in place of ``x``."""
    pos = 0
    values = []

    def literal(chars: str, expected: str):
        nonlocal pos
        if pos < len(text) and text[pos] in chars:
            pos += 1
        else:
            raise VariantParseError(text, pos, expected)

    def number():
        nonlocal pos
        m = re.compile(r"\d+").match(text, pos)
        if not m:
            raise VariantParseError(text, pos, "a number")
        pos = m.end()
        values.append(int(m.group()))

    literal("H", "'H'"); number()
    literal("L", "'L'"); number()
    literal("-", "'-'"); literal("(", "'('"); number()
    literal("+", "'+'"); literal("1", "'1'"); literal(")", "')'")
    literal("x×X*", "'x'"); number()
    if pos != len(text):
        raise VariantParseError(text, pos, "end of string")
    h, l, a, b = values
    return ScheduleConfig(h, l, a, b, attn_kind=attn_kind, ffn_hidden_high=ffn_hidden_high,
                          ffn_lambda=ffn_lambda)


@dataclass(frozen=True)
class EncoderLayerParams:
    attention: AttentionParams
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    norm1_scale: np.ndarray
    norm1_shift: np.ndarray
    norm2_scale: np.ndarray
    norm2_shift: np.ndarray

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def ffn_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in
                ("W1", "b1", "W2", "b2", "norm1_scale", "norm1_shift", "norm2_scale", "norm2_shift")}

    def replace(self, **changes) -> "EncoderLayerParams":
        return replace(self, **changes)


def init_layer_params(hyper: AttentionHyper, kind: str, hidden: int, seed: int) -> EncoderLayerParams:
    ss = np.random.SeedSequence(seed)
    attn_seed, ffn_seed = ss.spawn(2)
    attention = init_params(hyper, int(attn_seed.generate_state(1)[0]), kind)
    rng = np.random.default_rng(ffn_seed)
    d = hyper.d_model
    return EncoderLayerParams(
        attention=attention,
        W1=rng.uniform(-1, 1, (d, hidden)) / np.sqrt(d),
        b1=np.zeros(hidden),
        W2=rng.uniform(-1, 1, (hidden, d)) / np.sqrt(hidden),
        b2=np.zeros(d),
        norm1_scale=np.ones(d),
        norm1_shift=np.zeros(d),
        norm2_scale=np.ones(d),
        norm2_shift=np.zeros(d),
    )


def init_encoder_params(config: ScheduleConfig, hyper: AttentionHyper, seed: int = 0) -> list[EncoderLayerParams]:
    """Independent parameters for every layer, ordered [A high, 1 low] x B."""
    seeds = np.random.SeedSequence(seed).generate_state(config.n_layers)
    return [
        init_layer_params(hyper, config.attn_kind, config.hidden_for(kind), int(s))
        for kind, s in zip(config.stage_kinds(), seeds)
    ]


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    """Token-wise standardization over channels; returns ``(y, x_hat, inv_std)``."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    x_hat = (x - mu) * inv_std
    return x_hat * scale + shift, x_hat, inv_std


def _layer_norm_backward(g, x_hat, inv_std, scale):
    g_hat = g * scale
    g_x = inv_std * (g_hat - g_hat.mean(-1, keepdims=True) - x_hat * (g_hat * x_hat).mean(-1, keepdims=True))
    return g_x, (g * x_hat).sum(0), g.sum(0)


def _post_attention(queries, attn_out, p: EncoderLayerParams, use_ffn: bool = True):
    x1, xh1, is1 = layer_norm(queries + attn_out, p.norm1_scale, p.norm1_shift)
    if not use_ffn:
        return x1, (x1, xh1, is1, None, None, None, None)
    pre = x1 @ p.W1 + p.b1
    hid = np.maximum(pre, 0.0)
    f = hid @ p.W2 + p.b2
    x2, xh2, is2 = layer_norm(x1 + f, p.norm2_scale, p.norm2_shift)
    return x2, (x1, xh1, is1, pre, hid, xh2, is2)


@dataclass
class LayerCache:
    attn: object
    post: tuple
    params: EncoderLayerParams
    use_ffn: bool


def layer_forward(queries, refs, pyramid, params: EncoderLayerParams, hyper: AttentionHyper,
                  use_ffn: bool = True):
    """One encoder layer with a backward cache (used for gradient checks)."""
    attn_out, attn_cache = attention_forward(queries, refs, pyramid, params.attention, hyper)
    out, post = _post_attention(np.asarray(queries, dtype=np.float64), attn_out, params, use_ffn)
    return out, LayerCache(attn_cache, post, params, use_ffn)


def layer_backward(cache: LayerCache, grad_out: np.ndarray) -> dict:
    p = cache.params
    x1, xh1, is1, pre, hid, xh2, is2 = cache.post
    grads: dict = {}
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.use_ffn:
        g_s2, grads["norm2_scale"], grads["norm2_shift"] = _layer_norm_backward(g, xh2, is2, p.norm2_scale)
        grads["W2"] = hid.T @ g_s2
        grads["b2"] = g_s2.sum(0)
        g_pre = (g_s2 @ p.W2.T) * (pre > 0)
        grads["W1"] = x1.T @ g_pre
        grads["b1"] = g_pre.sum(0)
        g = g_s2 + g_pre @ p.W1.T
    g_s1, grads["norm1_scale"], grads["norm1_shift"] = _layer_norm_backward(g, xh1, is1, p.norm1_scale)
    attn_grads = attn_backward(cache.attn, g_s1)
    grads["queries"] = attn_grads.pop("queries") + g_s1
    grads["levels"] = attn_grads.pop("levels")
    grads["attention"] = attn_grads
    return grads


def resolve_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


@dataclass(frozen=True)
class EncoderState:
    tokens: np.ndarray
    partition: TokenPartition
    refs: ReferencePoints
    geometry: FeaturePyramid
    high_updates_in_block: int = 0
    last_field: SamplingField | None = None

    @classmethod
    def from_pyramid(cls, pyramid: FeaturePyramid, n_high_levels: int) -> "EncoderState":
        return cls(
            tokens=pyramid.flatten(),
            partition=split_tokens(pyramid, n_high_levels),
            refs=reference_points(pyramid),
            geometry=pyramid,
        )

    def source_levels(self) -> list[np.ndarray]:
        d = self.geometry.d_model
        return [
            self.tokens[s:s + n].reshape(h, w, d)
            for s, n, (h, w) in zip(self.geometry.level_offsets, self.geometry.level_sizes, self.geometry.shapes)
        ]

    def pyramid(self) -> FeaturePyramid:
        return self.geometry.with_tokens(self.tokens)


def _run_stage(state: EncoderState, idx: np.ndarray, params: EncoderLayerParams, hyper, threads):
    if params.attention.kind not in KINDS:
        raise ValueError(f"unknown attention kind {params.attention.kind!r}")
    queries = state.tokens[idx]
    attn_out, fld = attend(queries, state.refs.xy[idx], state.source_levels(), params.attention, hyper,
                           threads=threads)
    out, _ = _post_attention(queries, attn_out, params)
    tokens = state.tokens.copy()
    tokens[idx] = out
    return tokens, fld


def high_level_layer(state: EncoderState, params: EncoderLayerParams, hyper: AttentionHyper,
                     threads: int = 1) -> EncoderState:
    """High-level tokens query the whole pyramid; low-level tokens are copied unchanged."""
    tokens, fld = _run_stage(state, state.partition.high_indices, params, hyper, threads)
    return replace(state, tokens=tokens, high_updates_in_block=state.high_updates_in_block + 1,
                   last_field=fld)


def low_level_layer(state: EncoderState, params: EncoderLayerParams, hyper: AttentionHyper,
                    threads: int = 1) -> EncoderState:
    """Block-initial low-level tokens query the updated high-level tokens plus themselves.

    Low-level tokens are never modified by the high-level layers of a block, so
    the current low-level rows are the block-initial ones.
    """
    if state.high_updates_in_block < 1:
        raise ValueError("low_level_layer needs at least one high-level layer earlier in the block")
    tokens, fld = _run_stage(state, state.partition.low_indices, params, hyper, threads)
    return replace(state, tokens=tokens, high_updates_in_block=0, last_field=fld)


def level_checksums(tokens: np.ndarray, geometry: FeaturePyramid) -> list[str]:
    sums = []
    for s, n in zip(geometry.level_offsets, geometry.level_sizes):
        chunk = np.ascontiguousarray(tokens[s:s + n], dtype="<f8")
        sums.append(hashlib.sha256(chunk.tobytes()).hexdigest())
    return sums


@dataclass
class Capture:
    layer: int
    kind: str
    query_indices: np.ndarray
    field: SamplingField


@dataclass
class EncoderResult:
    pyramid: FeaturePyramid
    trace: list[dict] = field(default_factory=list)
    captures: dict[int, Capture] = field(default_factory=dict)
    states: list[EncoderState] = field(default_factory=list)


def run_encoder(
    pyramid: FeaturePyramid,
    config: ScheduleConfig,
    params: Sequence[EncoderLayerParams] | None = None,
    seed: int = 0,
    hyper: AttentionHyper | None = None,
    trace: bool = True,
    capture_layers: Sequence[int] = (),
    keep_states: bool = False,
    threads: int | None = None,
) -> EncoderResult:
    """Run the ``(A+1) x B`` schedule; parameters are initialized from ``seed`` when not given."""
    if config.n_levels != pyramid.n_levels:
        raise ValueError(
            f"{config.variant} needs {config.n_levels} levels, the pyramid has {pyramid.n_levels}"
        )
    if hyper is None:
        hyper = AttentionHyper(n_levels=pyramid.n_levels, d_model=pyramid.d_model)
    if hyper.n_levels != pyramid.n_levels or hyper.d_model != pyramid.d_model:
        raise ValueError("attention hyperparameters do not match the pyramid")
    if params is None:
        params = init_encoder_params(config, hyper, seed)
    if len(params) != config.n_layers:
        raise ValueError(
            f"{config.variant} expects (A+1)*B = {config.n_layers} layer parameter sets, got {len(params)}"
        )
    for i, (kind, p) in enumerate(zip(config.stage_kinds(), params)):
        if p.attention.kind != config.attn_kind:
            raise ValueError(f"layer {i} uses {p.attention.kind} attention, config says {config.attn_kind}")
        if p.hidden != config.hidden_for(kind):
            raise ValueError(f"layer {i} ({kind}) has FFN hidden {p.hidden}, expected {config.hidden_for(kind)}")
    threads = resolve_threads() if threads is None else threads
    capture_layers = set(capture_layers)
    for layer in capture_layers:
        if not 0 <= layer < config.n_layers:
            raise IndexError(f"layer {layer} out of range for {config.n_layers} layers")

    state = EncoderState.from_pyramid(pyramid, config.h_levels)
    result = EncoderResult(pyramid=pyramid)
    if keep_states:
        result.states.append(state)
    for i, (kind, p) in enumerate(zip(config.stage_kinds(), params)):
        step = high_level_layer if kind == "high" else low_level_layer
        state = step(state, p, hyper, threads=threads)
        idx = state.partition.high_indices if kind == "high" else state.partition.low_indices
        if trace:
            result.trace.append({
                "stage_index": i,
                "kind": kind,
                "n_queries": int(idx.size),
                "token_checksums": level_checksums(state.tokens, pyramid),
            })
        if i in capture_layers:
            result.captures[i] = Capture(i, kind, idx, state.last_field)
        if keep_states:
            result.states.append(state)
    result.pyramid = state.pyramid()
    return result
