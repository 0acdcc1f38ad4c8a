"""Command-line front end.

Subcommands: ``run`` (encoder trace), ``cost`` (FLOP report), ``gradcheck``
and ``topk`` (highest-weight sampling locations of one layer). All output is
JSON. Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .attention import KINDS, AttentionHyper
from .costmodel import InputDims, baseline_report, variant_sweep
from .encoder import Capture, parse_variant, run_encoder
from .errors import NumericalError
from .pyramid import FeaturePyramid, build_pyramid, load_pyramid

__all__ = ["main", "topk_locations", "cmd_run", "cmd_cost", "cmd_gradcheck", "cmd_topk"]

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _strides(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"strides must be comma-separated integers, got {text!r}") from None


def _add_model_flags(p, height, width, single_variant=True):
    if single_variant:
        p.add_argument("--variant", default="H3L1-(2+1)x3")
    p.add_argument("--attn", choices=KINDS, default="kda")
    p.add_argument("--height", type=int, default=height)
    p.add_argument("--width", type=int, default=width)
    p.add_argument("--dmodel", type=int, default=256)
    p.add_argument("--strides", type=_strides, default=(8, 16, 32, 64))
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--points", type=int, default=4)
    p.add_argument("--ffn-hidden", type=int, default=1024)
    p.add_argument("--lambda", dest="ffn_lambda", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lite-encoder", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the encoder on a synthetic or fixture pyramid and write its trace")
    _add_model_flags(run, 512, 512)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--fixture", type=Path)
    run.add_argument("--out", type=Path)

    cost = sub.add_parser("cost", help="analytic FLOP report for one or more variants")
    _add_model_flags(cost, 800, 1216, single_variant=False)
    cost.add_argument("--variant", dest="variants", action="append", help="repeat to sweep several variants")
    cost.add_argument("--baseline-only", action="store_true")
    cost.add_argument("--out", type=Path)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    gc.add_argument("--attn", choices=KINDS, default="kda")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--queries", type=int, default=5)
    gc.add_argument("--dmodel", type=int, default=8)
    gc.add_argument("--heads", type=int, default=2)
    gc.add_argument("--points", type=int, default=2)
    gc.add_argument("--no-ffn", action="store_true", help="check the layer without its FFN")
    gc.add_argument("--out", type=Path)

    tk = sub.add_parser("topk", help="export the highest-weight sampling locations of one layer")
    _add_model_flags(tk, 128, 128)
    tk.add_argument("--seed", type=int, default=0)
    tk.add_argument("--fixture", type=Path)
    tk.add_argument("--layer", type=int, default=0)
    tk.add_argument("--k-top", type=int, default=100)
    tk.add_argument("--out", type=Path)
    return parser


def _emit(obj, out: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _config(args):
    return parse_variant(args.variant, attn_kind=args.attn, ffn_hidden_high=args.ffn_hidden,
                         ffn_lambda=args.ffn_lambda)


def _pyramid(args) -> FeaturePyramid:
    if args.fixture is not None:
        return load_pyramid(args.fixture)
    return build_pyramid(args.height, args.width, args.dmodel, args.strides, seed=args.seed)


def _hyper(args, pyramid: FeaturePyramid) -> AttentionHyper:
    return AttentionHyper(args.heads, args.points, pyramid.n_levels, pyramid.d_model)


def cmd_run(args) -> int:
    config = _config(args)
    pyramid = _pyramid(args)
    result = run_encoder(pyramid, config, seed=args.seed, hyper=_hyper(args, pyramid))
    _emit(result.trace, args.out)
    return EXIT_OK


def cmd_cost(args) -> int:
    dims = InputDims(args.height, args.width, args.dmodel, tuple(args.strides), args.heads, args.points)
    if args.baseline_only:
        _emit(baseline_report(dims, args.ffn_hidden).to_dict(), args.out)
        return EXIT_OK
    variants = args.variants or ["H3L1-(2+1)x3"]
    reports = variant_sweep(variants, dims, args.attn, args.ffn_hidden, args.ffn_lambda)
    payload = [r.to_dict() for r in reports]
    _emit(payload[0] if len(payload) == 1 else payload, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    inst = gradcheck.make_instance(args.attn, seed=args.seed, n_queries=args.queries, m_heads=args.heads,
                                   k_points=args.points, d_model=args.dmodel, layer=True)
    attn_report = gradcheck.check_attention(inst)
    layer_report = gradcheck.check_layer(inst, use_ffn=not args.no_ffn)
    passed = attn_report.passed and layer_report.passed
    _emit({
        "attn_kind": args.attn,
        "passed": passed,
        "tolerance": gradcheck.GRAD_TOL,
        "max_relative_error": max(attn_report.max_relative_error, layer_report.max_relative_error),
        "checks": [attn_report.to_dict(), layer_report.to_dict()],
    }, args.out)
    return EXIT_OK if passed else EXIT_NUMERIC


def _entry(q, m, l, k, loc, weight, query_indices):
    return {
        "query_index": int(query_indices[q]),
        "head": int(m),
        "level": int(l),
        "point": int(k),
        "x": float(loc[0]),
        "y": float(loc[1]),
        "weight": float(weight),
    }


def topk_locations(capture: Capture, k_top: int) -> dict:
    """Top ``k_top`` sampling slots by attention weight, globally and per level.

    Ties are broken by slot order (query, head, level, point). ``x``/``y`` are
    in level-pixel units.
    """
    if k_top < 1:
        raise ValueError(f"k_top must be positive, got {k_top}")
    w = capture.field.weights  # (n, M, L, K)
    loc = capture.field.locations
    flat = w.ravel()
    order = np.argsort(-flat, kind="stable")[:k_top]
    top = [_entry(*np.unravel_index(i, w.shape), loc[np.unravel_index(i, w.shape)], flat[i],
                  capture.query_indices) for i in order]
    per_level = []
    for l in range(w.shape[2]):
        wl = w[:, :, l, :]
        fl = wl.ravel()
        ol = np.argsort(-fl, kind="stable")[:k_top]
        entries = []
        for i in ol:
            q, m, k = np.unravel_index(i, wl.shape)
            entries.append(_entry(q, m, l, k, loc[q, m, l, k], fl[i], capture.query_indices))
        per_level.append({"level": l, "locations": entries})
    return {"layer": capture.layer, "stage_kind": capture.kind, "k_top": k_top, "top": top,
            "per_level": per_level}


def cmd_topk(args) -> int:
    config = _config(args)
    if not 0 <= args.layer < config.n_layers:
        raise IndexError(f"--layer {args.layer} out of range: {config.variant} has {config.n_layers} layers")
    pyramid = _pyramid(args)
    result = run_encoder(pyramid, config, seed=args.seed, hyper=_hyper(args, pyramid), trace=False,
                         capture_layers=[args.layer])
    payload = topk_locations(result.captures[args.layer], args.k_top)
    payload.update({"variant": config.variant, "attn_kind": config.attn_kind})
    _emit(payload, args.out)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "cost": cmd_cost, "gradcheck": cmd_gradcheck, "topk": cmd_topk}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"lite-encoder: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"lite-encoder: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, IndexError, OSError, KeyError) as exc:
        print(f"lite-encoder: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
