import numpy as np
import pytest

from conftest import random_params
from lite_encoder.attention import AttentionHyper
from lite_encoder.encoder import (
    EncoderState,
    ScheduleConfig,
    high_level_layer,
    init_encoder_params,
    init_layer_params,
    layer_norm,
    level_checksums,
    low_level_layer,
    parse_variant,
    resolve_threads,
    run_encoder,
)
from lite_encoder.errors import VariantParseError
from lite_encoder.pyramid import build_pyramid
from oracles import naive_layer, standardize

ENCODER_VARIANTS = ["H2L2-(2+1)x3", "H3L1-(6+1)x1", "H3L1-(3+1)x2", "H3L1-(2+1)x3"]


def _perturbed_layer(hyper, kind, hidden, seed, scale=0.3):
    lp = init_layer_params(hyper, kind, hidden, seed)
    r = np.random.default_rng(seed + 100)
    ffn = {k: v + scale * r.standard_normal(v.shape) for k, v in lp.ffn_arrays().items()}
    return lp.replace(attention=random_params(hyper, kind, seed), **ffn)


def _zero_layer(lp):
    att = lp.attention
    att = att.replace(**{k: np.zeros_like(v) for k, v in att.arrays().items()})
    return lp.replace(attention=att, W1=np.zeros_like(lp.W1), W2=np.zeros_like(lp.W2))


class TestParseVariant:
    @pytest.mark.parametrize("text,fields", [
        ("H3L1-(2+1)x3", (3, 1, 2, 3)),
        ("H2L2-(2+1)x3", (2, 2, 2, 3)),
        ("H3L1-(6+1)x1", (3, 1, 6, 1)),
        ("H3L1-(3+1)×2", (3, 1, 3, 2)),
    ])
    def test_fields(self, text, fields):
        c = parse_variant(text)
        assert (c.h_levels, c.l_levels, c.a_high_updates, c.b_blocks) == fields
        assert c.attn_kind == "kda" and c.ffn_hidden_low == 128

    def test_roundtrip_label(self):
        for v in ENCODER_VARIANTS:
            assert parse_variant(v).variant == v

    @pytest.mark.parametrize("text,pos", [
        ("H3L1(2+1)x3", 4),
        ("H3L1-(2+2)x3", 8),
        ("h3L1-(2+1)x3", 0),
        ("H3L1-(2+1)x", 11),
        ("H3L1-(2+1)x3 ", 12),
        ("H3L-(2+1)x3", 3),
    ])
    def test_malformed_reports_position(self, text, pos):
        with pytest.raises(VariantParseError) as err:
            parse_variant(text)
        assert err.value.position == pos
        assert f"position {pos}" in str(err.value)

    def test_zero_high_updates_rejected(self):
        with pytest.raises(ValueError, match="A must be"):
            parse_variant("H3L1-(0+1)x3")

    def test_other_invalid(self):
        for bad in ("H3L1-(2+1)x0", "H0L4-(2+1)x1"):
            with pytest.raises(ValueError):
                parse_variant(bad)
        with pytest.raises(ValueError):
            parse_variant("H3L1-(2+1)x1", ffn_lambda=0)


class TestSchedule:
    def test_nine_layers(self):
        c = parse_variant("H3L1-(2+1)x3")
        assert c.n_layers == 9
        assert c.stage_kinds() == ["high", "high", "low"] * 3

    def test_seven_layers(self):
        assert parse_variant("H3L1-(6+1)x1").n_layers == 7

    def test_hidden_sizes(self):
        c = parse_variant("H3L1-(2+1)x1", ffn_hidden_high=64, ffn_lambda=4)
        params = init_encoder_params(c, AttentionHyper(2, 2, 4, 8), seed=0)
        assert [p.hidden for p in params] == [64, 64, 16]

    def test_layers_are_independent(self):
        c = parse_variant("H3L1-(2+1)x1")
        params = init_encoder_params(c, AttentionHyper(2, 2, 4, 8), seed=0)
        assert not np.array_equal(params[0].W1, params[1].W1)
        assert not np.array_equal(params[0].attention.W_V, params[1].attention.W_V)


@pytest.fixture
def toy():
    pyr = build_pyramid(64, 64, 8, [16, 32, 64], seed=11)
    hyper = AttentionHyper(m_heads=2, k_points=2, n_levels=3, d_model=8)
    return pyr, hyper


class TestRunEncoder:
    def test_query_counts(self, toy):
        pyr, hyper = toy
        c = parse_variant("H2L1-(2+1)x3", ffn_hidden_high=16)
        res = run_encoder(pyr, c, hyper=hyper, threads=1)
        n_h = pyr.level_sizes[0] + pyr.level_sizes[1]
        n_l = pyr.level_sizes[2]
        assert [t["n_queries"] for t in res.trace] == [n_h, n_h, n_l] * 3
        assert sum(t["n_queries"] for t in res.trace) == 3 * (2 * n_h + n_l)
        assert [t["stage_index"] for t in res.trace] == list(range(9))

    @pytest.mark.parametrize("variant", ["H2L1-(2+1)x2", "H1L2-(3+1)x1"])
    def test_structure_and_intactness(self, toy, variant):
        pyr, hyper = toy
        c = parse_variant(variant, ffn_hidden_high=16)
        res = run_encoder(pyr, c, hyper=hyper, keep_states=True, threads=1)
        assert res.pyramid.shapes == pyr.shapes and res.pyramid.strides == pyr.strides
        assert len(res.states) == c.n_layers + 1
        part = res.states[0].partition
        for before, after, kind in zip(res.states, res.states[1:], c.stage_kinds()):
            untouched = part.low_indices if kind == "high" else part.high_indices
            changed = part.high_indices if kind == "high" else part.low_indices
            assert before.tokens[untouched].tobytes() == after.tokens[untouched].tobytes()
            assert not np.array_equal(before.tokens[changed], after.tokens[changed])

    def test_checksums_track_intact_levels(self, toy):
        pyr, hyper = toy
        c = parse_variant("H2L1-(2+1)x1", ffn_hidden_high=16)
        res = run_encoder(pyr, c, hyper=hyper, threads=1)
        init = level_checksums(pyr.flatten(), pyr)
        t = res.trace
        assert t[0]["token_checksums"][2] == t[1]["token_checksums"][2] == init[2]
        assert t[2]["token_checksums"][:2] == t[1]["token_checksums"][:2]
        assert t[2]["token_checksums"][2] != init[2]

    def test_zero_weights_reduce_to_normalization(self, toy):
        pyr, hyper = toy
        c = parse_variant("H2L1-(2+1)x2", ffn_hidden_high=16)
        params = [_zero_layer(p) for p in init_encoder_params(c, hyper, seed=3)]
        res = run_encoder(pyr, c, params=params, hyper=hyper, threads=1)
        ones, zeros = np.ones(8), np.zeros(8)
        tokens = pyr.flatten().copy()
        part = EncoderState.from_pyramid(pyr, 2).partition
        for kind in c.stage_kinds():
            idx = part.high_indices if kind == "high" else part.low_indices
            tokens[idx] = standardize(standardize(tokens[idx], ones, zeros), ones, zeros)
        np.testing.assert_allclose(res.pyramid.flatten(), tokens, atol=1e-12)

    def test_wrong_param_count(self, toy):
        pyr, hyper = toy
        c = parse_variant("H2L1-(2+1)x3", ffn_hidden_high=16)
        params = init_encoder_params(c, hyper)[:-1]
        with pytest.raises(ValueError, match=r"\(A\+1\)\*B = 9"):
            run_encoder(pyr, c, params=params, hyper=hyper)

    def test_level_mismatch(self, toy):
        pyr, hyper = toy
        with pytest.raises(ValueError, match="levels"):
            run_encoder(pyr, parse_variant("H3L1-(2+1)x1"), hyper=hyper)

    def test_kind_mismatch(self, toy):
        pyr, hyper = toy
        c = parse_variant("H2L1-(1+1)x1", ffn_hidden_high=16)
        params = init_encoder_params(parse_variant("H2L1-(1+1)x1", "deformable", 16), hyper)
        with pytest.raises(ValueError, match="attention"):
            run_encoder(pyr, c, params=params, hyper=hyper)

    @pytest.mark.parametrize("kind", ["deformable", "kda"])
    def test_deterministic_across_threads(self, toy, kind):
        pyr, hyper = toy
        c = parse_variant("H2L1-(2+1)x2", kind, 16)
        a = run_encoder(pyr, c, hyper=hyper, seed=5, threads=1)
        b = run_encoder(pyr, c, hyper=hyper, seed=5, threads=3)
        assert a.trace == b.trace
        assert a.pyramid.flatten().tobytes() == b.pyramid.flatten().tobytes()

    def test_capture(self, toy):
        pyr, hyper = toy
        c = parse_variant("H2L1-(1+1)x1", ffn_hidden_high=16)
        res = run_encoder(pyr, c, hyper=hyper, capture_layers=[1], threads=1)
        cap = res.captures[1]
        assert cap.kind == "low" and cap.field.weights.shape == (pyr.level_sizes[2], 2, 3, 2)
        with pytest.raises(IndexError):
            run_encoder(pyr, c, hyper=hyper, capture_layers=[2])


class TestLayers:
    @pytest.fixture
    def two_level(self):
        pyr = build_pyramid(32, 48, 4, [8, 16], seed=4)
        hyper = AttentionHyper(m_heads=2, k_points=2, n_levels=2, d_model=4)
        return pyr, hyper

    @pytest.mark.parametrize("kind", ["deformable", "kda"])
    def test_high_layer_matches_composition_oracle(self, two_level, kind):
        pyr, hyper = two_level
        state = EncoderState.from_pyramid(pyr, 1)
        lp = _perturbed_layer(hyper, kind, 6, seed=1)
        new = high_level_layer(state, lp, hyper)
        hi = state.partition.high_indices
        want = naive_layer(kind, state.tokens[hi], state.refs.xy[hi], state.source_levels(), lp, 2, 2)
        np.testing.assert_allclose(new.tokens[hi], want, atol=1e-11)
        assert new.tokens[state.partition.low_indices].tobytes() == \
            state.tokens[state.partition.low_indices].tobytes()

    @pytest.mark.parametrize("kind", ["deformable", "kda"])
    def test_low_layer_matches_composition_oracle(self, two_level, kind):
        pyr, hyper = two_level
        state = EncoderState.from_pyramid(pyr, 1)
        state = high_level_layer(state, _perturbed_layer(hyper, kind, 6, seed=2), hyper)
        lp = _perturbed_layer(hyper, kind, 3, seed=3)
        new = low_level_layer(state, lp, hyper)
        lo = state.partition.low_indices
        # queries are the block-initial low-level tokens, sources hold the updated high level
        np.testing.assert_array_equal(state.tokens[lo], pyr.flatten()[lo])
        want = naive_layer(kind, state.tokens[lo], state.refs.xy[lo], state.source_levels(), lp, 2, 2)
        np.testing.assert_allclose(new.tokens[lo], want, atol=1e-11)
        hi = state.partition.high_indices
        assert new.tokens[hi].tobytes() == state.tokens[hi].tobytes()
        assert new.high_updates_in_block == 0

    def test_low_layer_precondition(self, two_level):
        pyr, hyper = two_level
        state = EncoderState.from_pyramid(pyr, 1)
        with pytest.raises(ValueError, match="high-level"):
            low_level_layer(state, init_layer_params(hyper, "kda", 4, 0), hyper)

    def test_layer_norm(self, rng):
        x = rng.standard_normal((5, 7)) * 3 + 2
        y, _, _ = layer_norm(x, np.ones(7), np.zeros(7))
        np.testing.assert_allclose(y.mean(1), 0, atol=1e-12)
        np.testing.assert_allclose(y, standardize(x, np.ones(7), np.zeros(7)), atol=1e-12)


def test_named_variants_intact_on_square_pyramid():
    pyr = build_pyramid(256, 256, 8, [8, 16, 32, 64], seed=0)
    hyper = AttentionHyper(2, 2, 4, 8)
    for v in ENCODER_VARIANTS:
        c = parse_variant(v, ffn_hidden_high=16)
        res = run_encoder(pyr, c, hyper=hyper, keep_states=True, threads=2)
        assert len(res.trace) == c.n_layers
        assert res.pyramid.shapes == pyr.shapes


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("LITE_ENCODER_THREADS", "3")
    assert resolve_threads() == 3
    monkeypatch.setenv("LITE_ENCODER_THREADS", "zero")
    with pytest.raises(ValueError):
        resolve_threads()
    monkeypatch.delenv("LITE_ENCODER_THREADS")
    assert resolve_threads() >= 1


def test_schedule_config_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(3, 1, 2, 3, attn_kind="dense")
    with pytest.raises(ValueError):
        ScheduleConfig(3, 1, 2, 3, ffn_hidden_high=4, ffn_lambda=8)
