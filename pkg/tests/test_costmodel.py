import json

import jsonschema
import numpy as np
import pytest

from lite_encoder.attention import AttentionHyper
from lite_encoder.costmodel import (
    COST_REPORT_SCHEMA,
    REFERENCE_INPUT,
    InputDims,
    baseline_report,
    encoder_flops,
    layer_flops,
    stage_query_counts,
    variant_sweep,
)
from lite_encoder.encoder import parse_variant, run_encoder
from lite_encoder.pyramid import build_pyramid

HYPER = AttentionHyper(8, 4, 4, 256)
HEADLINE_VARIANTS = ["H2L2-(2+1)x3", "H3L1-(6+1)x1", "H3L1-(2+1)x3"]


class TestLayerFlops:
    @pytest.mark.parametrize("kind", ["deformable", "kda"])
    def test_linear_in_queries(self, kind):
        one = layer_flops(1000, HYPER, kind, 1024)
        two = layer_flops(2000, HYPER, kind, 1024)
        assert all(two[k] == 2 * one[k] for k in one)
        assert all(v == 0 for v in layer_flops(0, HYPER, kind, 1024).values())

    def test_kinds_differ_only_in_weights(self):
        a = layer_flops(37, HYPER, "deformable", 1024)
        b = layer_flops(37, HYPER, "kda", 1024)
        assert {k for k in a if a[k] != b[k]} == {"weights"}

    def test_micro_case_hand_count(self):
        # d=2, one head, one level, one point, hidden 4; tallied by hand:
        # offsets: 2x2 matrix (4 MAC) + 2 bias = 10
        # weights: 2 MAC + 1 bias + softmax 5 = 10
        # sampling: 4 corners x 2 channels MAC = 16
        # combine: 2 channels MAC = 4
        # projections: W_V, W_O (4 MAC each) + 2 x 2 bias = 20
        # ffn: 8 + 8 MAC, 4 + 2 bias, ReLU 4 x 5 = 58
        # norm: 2 norms x 2 channels x 5 = 20
        hyper = AttentionHyper(1, 1, 1, 2)
        f = layer_flops(1, hyper, "deformable", 4, d_model=2)
        assert f == {"offsets": 10, "weights": 10, "sampling": 16, "combine": 4,
                     "projections": 20, "ffn": 58, "norm": 20}
        assert sum(f.values()) == 138

    def test_micro_case_kda(self):
        # W_K (4 MAC = 8, + 2 bias) + key sampling 16 + q.k 4 + softmax 5 = 35
        f = layer_flops(1, AttentionHyper(1, 1, 1, 2), "kda", 4)
        assert f["weights"] == 35

    def test_errors(self):
        with pytest.raises(ValueError):
            layer_flops(1, HYPER, "dense", 1024)
        with pytest.raises(ValueError):
            layer_flops(1, HYPER, "kda", 1024, d_model=128)


class TestReference:
    def test_token_counts(self):
        assert REFERENCE_INPUT.level_sizes() == [247, 950, 3800, 15200]

    def test_baseline_self_comparison(self):
        rep = baseline_report()
        assert rep.reduction_fraction == 0.0
        assert len(rep.stages) == 6 and all(s["n_queries"] == REFERENCE_INPUT.n_tokens for s in rep.stages)

    def test_baseline_shared(self):
        reps = variant_sweep(HEADLINE_VARIANTS)
        assert {r.baseline_flops for r in reps} == {baseline_report().total_flops}

    @pytest.mark.parametrize("kind", ["deformable", "kda"])
    def test_headline_ordering(self, kind):
        fr = [r.reduction_fraction for r in variant_sweep(HEADLINE_VARIANTS, attn_kind=kind)]
        assert fr[0] > fr[1] > fr[2]
        for f, (lo, hi) in zip(fr, [(0.70, 0.84), (0.62, 0.78), (0.54, 0.70)]):
            assert lo <= f <= hi

    def test_total_is_sum(self):
        rep = encoder_flops("H3L1-(3+1)x2")
        assert rep.total_flops == sum(sum(s["flops"].values()) for s in rep.stages)
        assert rep.reduction_fraction == pytest.approx(1 - rep.total_flops / rep.baseline_flops)

    def test_scale_invariance(self):
        for v in HEADLINE_VARIANTS:
            a = encoder_flops(v, REFERENCE_INPUT).reduction_fraction
            b = encoder_flops(v, REFERENCE_INPUT.scaled(2)).reduction_fraction
            assert abs(a - b) < 1e-3


class TestMonotonicity:
    def test_in_a(self):
        totals = [encoder_flops(f"H3L1-({a}+1)x2").total_flops for a in range(1, 7)]
        assert all(x < y for x, y in zip(totals, totals[1:]))

    def test_in_h(self):
        per_high = [encoder_flops(f"H{h}L{4 - h}-(2+1)x1").stages[0]["flops"] for h in (1, 2, 3)]
        totals = [sum(f.values()) for f in per_high]
        assert totals[0] < totals[1] < totals[2]


class TestSweep:
    def test_empty(self):
        assert variant_sweep([]) == []

    def test_order_preserving_and_deterministic(self):
        order = ["H3L1-(2+1)x3", "H2L2-(2+1)x3", "H3L1-(6+1)x1"]
        a = variant_sweep(order)
        b = variant_sweep(order)
        assert [r.variant for r in a] == order
        assert [r.dumps() for r in a] == [r.dumps() for r in b]

    def test_failure_names_variant(self):
        with pytest.raises(ValueError, match="H3L1-oops"):
            variant_sweep(["H3L1-(2+1)x3", "H3L1-oops"])


class TestSchema:
    def test_reports_validate(self):
        for rep in [*variant_sweep(HEADLINE_VARIANTS), baseline_report()]:
            obj = json.loads(rep.dumps())
            jsonschema.validate(obj, COST_REPORT_SCHEMA)
            assert set(obj["stages"][0]["flops"]) == {"offsets", "weights", "sampling", "combine",
                                                      "projections", "ffn", "norm"}

    def test_schema_rejects_extra_field(self):
        obj = json.loads(encoder_flops("H3L1-(2+1)x3").dumps())
        obj["extra"] = 1
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(obj, COST_REPORT_SCHEMA)


def test_counts_agree_with_encoder_trace():
    dims = InputDims(128, 192, 8, (8, 16, 32, 64), 2, 2)
    pyr = build_pyramid(128, 192, 8, dims.strides, seed=0)
    for v in ["H2L2-(2+1)x3", "H3L1-(6+1)x1", "H3L1-(3+1)x2", "H3L1-(2+1)x3"]:
        c = parse_variant(v, ffn_hidden_high=16)
        trace = run_encoder(pyr, c, hyper=dims.hyper(), threads=1).trace
        assert [s["n_queries"] for s in encoder_flops(c, dims).stages] == [t["n_queries"] for t in trace]
        assert stage_query_counts(c, dims) == [t["n_queries"] for t in trace]


def test_level_mismatch():
    with pytest.raises(ValueError):
        stage_query_counts(parse_variant("H2L1-(2+1)x1"), REFERENCE_INPUT)


def test_reduction_grows_with_fewer_high_tokens():
    fr = np.array([encoder_flops(f"H{h}L{4 - h}-(2+1)x3").reduction_fraction for h in (1, 2, 3)])
    assert np.all(np.diff(fr) < 0)
