"""Long-tailed multimodal fusion lab: routing metrics, group DRO, NTK analysis and experiment pipelines."""

from ._core import (
    analyze,
    consistency,
    default_config_yaml,
    generate,
    group_distribution,
    normalize_config,
    ntk,
    protocol,
    sweep,
    top_eigvec,
    train,
    uncertainty_metrics,
    update_lambda,
)

__all__ = [
    "analyze",
    "consistency",
    "default_config_yaml",
    "generate",
    "group_distribution",
    "normalize_config",
    "ntk",
    "protocol",
    "sweep",
    "top_eigvec",
    "train",
    "uncertainty_metrics",
    "update_lambda",
]
