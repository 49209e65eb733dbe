"""Diffusion recommenders for implicit feedback (C++ core with Python bindings)."""

from ._recfusion import (
    CheckpointError,
    ConfigError,
    Model,
    TrainingDiverged,
    alpha_bars,
    bernoulli_chain,
    bernoulli_marginal,
    ease_fit,
    effective_config,
    evaluate,
    gaussian_forward,
    linear_schedule,
    ndcg_at_k,
    popularity_fit,
    prepare,
    recall_at_k,
    top_k,
    train,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "Model",
    "TrainingDiverged",
    "alpha_bars",
    "bernoulli_chain",
    "bernoulli_marginal",
    "ease_fit",
    "effective_config",
    "evaluate",
    "gaussian_forward",
    "linear_schedule",
    "ndcg_at_k",
    "popularity_fit",
    "prepare",
    "recall_at_k",
    "top_k",
    "train",
]
