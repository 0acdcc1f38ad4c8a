"""Finite-difference verification of the analytic attention and layer gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import (
    AttentionHyper,
    AttentionParams,
    attention_forward,
    attn_backward,
    init_params,
    resolve_locations,
)
from .encoder import init_layer_params, layer_backward, layer_forward

__all__ = [
    "MAX_CHECK_SIZE",
    "GRAD_TOL",
    "GradCheckInstance",
    "GradCheckReport",
    "numerical_gradient",
    "relative_error",
    "make_instance",
    "check_attention",
    "check_layer",
]

FD_STEP = 1e-6
GRAD_TOL = 1e-5
# below this magnitude a gradient is compared absolutely; covers exact zeros
# such as b_K (softmax is invariant to it) where central differences only see rounding noise
ERROR_FLOOR = 1e-3
MAX_CHECK_SIZE = 10_000


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)


@dataclass
class GradCheckInstance:
    kind: str
    hyper: AttentionHyper
    queries: np.ndarray
    refs: np.ndarray
    levels: list[np.ndarray]
    params: AttentionParams
    upstream: np.ndarray
    layer: object = None

    def n_values(self) -> int:
        n = self.queries.size + sum(a.size for a in self.levels) + self.params.n_parameters()
        if self.layer is not None:
            n += sum(a.size for a in self.layer.ffn_arrays().values())
        return n


@dataclass
class GradCheckReport:
    kind: str
    mode: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = GRAD_TOL

    @property
    def max_relative_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "attn_kind": self.kind,
            "mode": self.mode,
            "max_relative_error": self.max_relative_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "per_tensor": dict(sorted(self.errors.items())),
        }


def _min_breakpoint_distance(inst: GradCheckInstance) -> float:
    shapes = [a.shape[:2] for a in inst.levels]
    loc = resolve_locations(inst.queries, inst.refs, inst.params, inst.hyper, shapes).locations
    frac = (loc - 0.5) % 1.0
    return float(np.min(np.minimum(frac, 1.0 - frac)))


def make_instance(kind: str, seed: int = 0, n_queries: int = 5,
                  level_shapes=((4, 4), (2, 3)), m_heads: int = 2, k_points: int = 2, d_model: int = 8,
                  ffn_hidden: int | None = None, layer: bool = False) -> GradCheckInstance:
    """A small random instance with every sample kept away from interpolation breakpoints."""
    hyper = AttentionHyper(m_heads, k_points, len(level_shapes), d_model)
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        base = init_params(hyper, seed, kind)
        # perturb every array so no gradient path is trivially zero
        params = base.replace(**{
            name: arr + 0.3 * rng.standard_normal(arr.shape) for name, arr in base.arrays().items()
        })
        inst = GradCheckInstance(
            kind=kind,
            hyper=hyper,
            queries=rng.standard_normal((n_queries, d_model)),
            refs=rng.uniform(0.15, 0.85, (n_queries, 2)),
            levels=[rng.standard_normal((h, w, d_model)) for h, w in level_shapes],
            params=params,
            upstream=rng.standard_normal((n_queries, d_model)),
        )
        if layer:
            lp = init_layer_params(hyper, kind, ffn_hidden or 2 * d_model, seed)
            lp = lp.replace(**{
                name: arr + 0.3 * rng.standard_normal(arr.shape) for name, arr in lp.ffn_arrays().items()
            })
            inst.layer = lp.replace(attention=params)
        if _min_breakpoint_distance(inst) > 1e-3:
            return inst
    raise RuntimeError("could not draw an instance away from sampling breakpoints")


def _check_size(inst: GradCheckInstance) -> None:
    if inst.n_values() > MAX_CHECK_SIZE:
        raise ValueError(
            f"gradient check over {inst.n_values()} values exceeds the limit of {MAX_CHECK_SIZE}; "
            "reduce --dmodel, --queries, --heads or --points"
        )


def check_attention(inst: GradCheckInstance, backward=None, h: float = FD_STEP) -> GradCheckReport:
    """Compare ``backward`` (default ``attn_backward``) against central differences for every parameter and input."""
    _check_size(inst)
    backward = attn_backward if backward is None else backward
    G = inst.upstream

    def loss(queries, levels, params):
        out, _ = attention_forward(queries, inst.refs, levels, params, inst.hyper)
        return float(np.sum(out * G))

    _, cache = attention_forward(inst.queries, inst.refs, inst.levels, inst.params, inst.hyper)
    grads = backward(cache, G)
    report = GradCheckReport(inst.kind, "attention")
    for name, arr in inst.params.arrays().items():
        num = numerical_gradient(lambda a: loss(inst.queries, inst.levels, inst.params.replace(**{name: a})), arr, h)
        report.errors[name] = relative_error(grads[name], num)
    num = numerical_gradient(lambda q: loss(q, inst.levels, inst.params), inst.queries, h)
    report.errors["queries"] = relative_error(grads["queries"], num)
    for l, lvl in enumerate(inst.levels):
        def f(a, l=l):
            levels = list(inst.levels)
            levels[l] = a
            return loss(inst.queries, levels, inst.params)
        report.errors[f"levels[{l}]"] = relative_error(grads["levels"][l], numerical_gradient(f, lvl, h))
    return report


def check_layer(inst: GradCheckInstance, use_ffn: bool = True, h: float = FD_STEP) -> GradCheckReport:
    """Gradient check of a whole encoder layer (attention, residuals, norms, optional FFN)."""
    if inst.layer is None:
        raise ValueError("instance was built without layer parameters; pass layer=True")
    _check_size(inst)
    G = inst.upstream
    lp = inst.layer

    def loss(queries, levels, p):
        out, _ = layer_forward(queries, inst.refs, levels, p, inst.hyper, use_ffn=use_ffn)
        return float(np.sum(out * G))

    _, cache = layer_forward(inst.queries, inst.refs, inst.levels, lp, inst.hyper, use_ffn=use_ffn)
    grads = layer_backward(cache, G)
    report = GradCheckReport(inst.kind, "layer" if use_ffn else "layer-no-ffn")
    for name, arr in lp.attention.arrays().items():
        f = lambda a, name=name: loss(inst.queries, inst.levels, lp.replace(attention=lp.attention.replace(**{name: a})))
        report.errors[name] = relative_error(grads["attention"][name], numerical_gradient(f, arr, h))
    names = ["norm1_scale", "norm1_shift"]
    if use_ffn:
        names += ["W1", "b1", "W2", "b2", "norm2_scale", "norm2_shift"]
    for name in names:
        f = lambda a, name=name: loss(inst.queries, inst.levels, lp.replace(**{name: a}))
        report.errors[name] = relative_error(grads[name], numerical_gradient(f, getattr(lp, name), h))
    num = numerical_gradient(lambda q: loss(q, inst.levels, lp), inst.queries, h)
    report.errors["queries"] = relative_error(grads["queries"], num)
    for l, lvl in enumerate(inst.levels):
        def f(a, l=l):
            levels = list(inst.levels)
            levels[l] = a
            return loss(inst.queries, levels, lp)
        report.errors[f"levels[{l}]"] = relative_error(grads["levels"][l], numerical_gradient(f, lvl, h))
    return report
