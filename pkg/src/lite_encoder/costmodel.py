"""Analytic FLOP and token accounting for encoder variants.

Conventions: one multiply-add is 2 FLOPs, bias additions count one FLOP per
output element, and element-wise nonlinearities (softmax, ReLU) and each
normalization cost ``ELEMENTWISE_COST`` FLOPs per element. Linear
projections are charged per query token, which matches a dense encoder where
every token is a query. Absolute numbers depend on these conventions; only
ratios against the baseline are meaningful.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .attention import KINDS, AttentionHyper
from .encoder import ScheduleConfig, parse_variant
from .pyramid import ceil_level_dims

__all__ = [
    "ELEMENTWISE_COST",
    "BASELINE_LAYERS",
    "REFERENCE_INPUT",
    "InputDims",
    "CostReport",
    "COST_REPORT_SCHEMA",
    "layer_flops",
    "stage_query_counts",
    "encoder_flops",
    "baseline_report",
    "variant_sweep",
]

ELEMENTWISE_COST = 5
BASELINE_LAYERS = 6
FLOP_KEYS = ("offsets", "weights", "sampling", "combine", "projections", "ffn", "norm")


@dataclass(frozen=True)
class InputDims:
    height: int = 800
    width: int = 1216
    d_model: int = 256
    strides: tuple[int, ...] = (8, 16, 32, 64)
    m_heads: int = 8
    k_points: int = 4

    def level_dims(self) -> list[tuple[int, int]]:
        return ceil_level_dims(self.height, self.width, self.strides)

    def level_sizes(self) -> list[int]:
        return [h * w for h, w in self.level_dims()]

    @property
    def n_tokens(self) -> int:
        return sum(self.level_sizes())

    def hyper(self) -> AttentionHyper:
        return AttentionHyper(self.m_heads, self.k_points, len(self.strides), self.d_model)

    def scaled(self, factor: int) -> "InputDims":
        return InputDims(self.height * factor, self.width * factor, self.d_model, self.strides,
                         self.m_heads, self.k_points)


REFERENCE_INPUT = InputDims()


def layer_flops(n_queries: int, hyper: AttentionHyper, kind: str, ffn_hidden: int,
                d_model: int | None = None) -> dict[str, int]:
    """FLOP breakdown of one encoder layer processing ``n_queries`` queries.

    ``weights`` is the only term that depends on ``kind``: the deformable
    weight head for deformable attention, or key projection, key sampling and
    the query-key products for KDA.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown attention kind {kind!r}")
    d = hyper.d_model if d_model is None else d_model
    if d != hyper.d_model:
        raise ValueError(f"d_model {d} disagrees with hyper.d_model {hyper.d_model}")
    nv, dh, c = hyper.n_v, hyper.d_head, ELEMENTWISE_COST

    per_query = {
        "offsets": 2 * d * 2 * nv + 2 * nv,
        "sampling": 2 * 4 * nv * dh,
        "combine": 2 * nv * dh,
        "projections": 2 * (2 * d * d + d),
        "ffn": 2 * 2 * d * ffn_hidden + ffn_hidden + d + c * ffn_hidden,
        "norm": 2 * c * d,
    }
    if kind == "deformable":
        per_query["weights"] = 2 * d * nv + nv + c * nv
    else:
        per_query["weights"] = (2 * d * d + d) + 2 * 4 * nv * dh + 2 * nv * dh + c * nv
    return {k: n_queries * per_query[k] for k in FLOP_KEYS}


def stage_query_counts(config: ScheduleConfig, dims: InputDims) -> list[int]:
    sizes = dims.level_sizes()
    if config.n_levels != len(sizes):
        raise ValueError(f"{config.variant} needs {config.n_levels} levels, input has {len(sizes)}")
    n_high = sum(sizes[:config.h_levels])
    n_low = sum(sizes[config.h_levels:])
    return [n_high if kind == "high" else n_low for kind in config.stage_kinds()]


@dataclass
class CostReport:
    variant: str
    input: InputDims
    stages: list[dict] = field(default_factory=list)
    total_flops: int = 0
    baseline_flops: int = 0

    @property
    def reduction_fraction(self) -> float:
        return 1.0 - self.total_flops / self.baseline_flops

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input": {
                "height": self.input.height,
                "width": self.input.width,
                "d_model": self.input.d_model,
                "strides": list(self.input.strides),
            },
            "stages": self.stages,
            "total_flops": self.total_flops,
            "baseline_flops": self.baseline_flops,
            "reduction_fraction": self.reduction_fraction,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


COST_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["variant", "input", "stages", "total_flops", "baseline_flops", "reduction_fraction"],
    "additionalProperties": False,
    "properties": {
        "variant": {"type": "string"},
        "input": {
            "type": "object",
            "required": ["height", "width", "d_model", "strides"],
            "additionalProperties": False,
            "properties": {
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "d_model": {"type": "integer", "minimum": 1},
                "strides": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            },
        },
        "stages": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "n_queries", "flops"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": ["high", "low", "full"]},
                    "n_queries": {"type": "integer", "minimum": 0},
                    "flops": {
                        "type": "object",
                        "required": list(FLOP_KEYS),
                        "additionalProperties": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "total_flops": {"type": "integer", "minimum": 0},
        "baseline_flops": {"type": "integer", "minimum": 1},
        "reduction_fraction": {"type": "number", "maximum": 1},
    },
}


def _baseline_stages(dims: InputDims, ffn_hidden: int) -> list[dict]:
    n = dims.n_tokens
    flops = layer_flops(n, dims.hyper(), "deformable", ffn_hidden)
    return [{"kind": "full", "n_queries": n, "flops": dict(flops)} for _ in range(BASELINE_LAYERS)]


def _total(stages: list[dict]) -> int:
    return sum(sum(s["flops"].values()) for s in stages)


def baseline_report(dims: InputDims = REFERENCE_INPUT, ffn_hidden: int = 1024) -> CostReport:
    """The reference encoder: six all-token deformable layers with the full FFN."""
    stages = _baseline_stages(dims, ffn_hidden)
    total = _total(stages)
    return CostReport(f"baseline-{BASELINE_LAYERS}x-deformable", dims, stages, total, total)


def encoder_flops(config: ScheduleConfig | str, dims: InputDims = REFERENCE_INPUT) -> CostReport:
    if isinstance(config, str):
        config = parse_variant(config)
    hyper = dims.hyper()
    stages = []
    for kind, n in zip(config.stage_kinds(), stage_query_counts(config, dims)):
        flops = layer_flops(n, hyper, config.attn_kind, config.hidden_for(kind))
        stages.append({"kind": kind, "n_queries": n, "flops": flops})
    baseline = _total(_baseline_stages(dims, config.ffn_hidden_high))
    return CostReport(config.variant, dims, stages, _total(stages), baseline)


def variant_sweep(variants: Sequence[str], dims: InputDims = REFERENCE_INPUT,
                  attn_kind: str = "kda", ffn_hidden_high: int = 1024, ffn_lambda: int = 8) -> list[CostReport]:
    configs = []
    for v in variants:
        try:
            configs.append(parse_variant(v, attn_kind, ffn_hidden_high, ffn_lambda))
        except ValueError as exc:
            raise ValueError(f"variant {v!r}: {exc}") from exc
    return [encoder_flops(c, dims) for c in configs]
