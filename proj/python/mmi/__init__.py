"""Interleaved image-text toy model with multi-image multi-scale feature sampling."""

from ._core import (
    ConfigError,
    DimensionError,
    Error,
    FormatError,
    IoError,
    Model,
    alpha_bar,
    bilinear_sample,
    build_sequence,
    config_defaults,
    count_flops,
    deform_attn,
    pack_sequences,
    scale_preset,
    parse_config,
    selftest,
    sweep_csv,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "Error",
    "FormatError",
    "IoError",
    "Model",
    "alpha_bar",
    "bilinear_sample",
    "build_sequence",
    "config_defaults",
    "count_flops",
    "deform_attn",
    "pack_sequences",
    "scale_preset",
    "parse_config",
    "selftest",
    "sweep_csv",
]
