"""Interleaved multi-scale encoder with deformable and key-aware deformable attention."""
from .attention import (
    AttentionHyper,
    AttentionParams,
    SamplingField,
    attend,
    attention_forward,
    attn_backward,
    deform_attn,
    init_params,
    kda_attn,
    resolve_locations,
)
from .costmodel import CostReport, InputDims, baseline_report, encoder_flops, layer_flops, variant_sweep
from .encoder import (
    EncoderLayerParams,
    EncoderState,
    ScheduleConfig,
    high_level_layer,
    init_encoder_params,
    low_level_layer,
    parse_variant,
    run_encoder,
)
from .errors import NumericalError, VariantParseError
from .pyramid import (
    FeatureLevel,
    FeaturePyramid,
    ReferencePoints,
    TokenPartition,
    build_pyramid,
    downsample_half,
    reference_points,
    split_tokens,
    token_ratios,
)
from .sampler import SampleLocation, bilinear_backward, bilinear_sample, sample_batch

__version__ = "0.1.0"
