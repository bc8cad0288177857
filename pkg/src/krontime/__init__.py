"""Kronecker-decomposed attention for long time series classification."""

from krontime.attention import (
    AttentionConfig,
    DecompositionPlan,
    factor_attention,
    flop_count,
    full_attention,
    kron_attention_backward,
    kron_attention_forward,
    kron_product,
    materialize_operator,
    score_flop_count,
    shared_factors,
)
from krontime.tensor import batched_matmul, mode_flatten, mode_fold, row_softmax

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "DecompositionPlan",
    "batched_matmul",
    "factor_attention",
    "flop_count",
    "full_attention",
    "kron_attention_backward",
    "kron_attention_forward",
    "kron_product",
    "materialize_operator",
    "mode_flatten",
    "mode_fold",
    "row_softmax",
    "score_flop_count",
    "shared_factors",
]
