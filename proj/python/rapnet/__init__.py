"""Temporal action proposal pipeline: synthetic data, training, post-processing, evaluation."""

import json

from ._core import (
    ConfigError,
    ContractError,
    DomainError,
    IoError,
    RapnetError,
    default_config,
    evaluate,
    generate_corpus,
    grad_check,
    infer,
    kmeans_anchors,
    oracle_actionness,
    segment_iou,
    snap_boundaries,
    soft_nms,
    tag_regions,
    train,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DomainError",
    "IoError",
    "RapnetError",
    "config",
    "default_config",
    "evaluate",
    "generate_corpus",
    "grad_check",
    "infer",
    "kmeans_anchors",
    "oracle_actionness",
    "segment_iou",
    "snap_boundaries",
    "soft_nms",
    "tag_regions",
    "train",
]


def config(**overrides):
    """Default config as a dict, with top-level sections updated from overrides."""
    cfg = json.loads(default_config())
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    return cfg
