"""Contrastive decoding for audio-language models, with error-profile analysis."""

from .core import (
    ContrastParams,
    apc_mask,
    combine_logits,
    entropy,
    greedy_select,
    jsd,
    softmax,
)
from .strategies import Method, StrategyConfig, candidate_layers, decode

__version__ = "0.1.0"

__all__ = [
    "ContrastParams",
    "Method",
    "StrategyConfig",
    "apc_mask",
    "candidate_layers",
    "combine_logits",
    "decode",
    "entropy",
    "greedy_select",
    "jsd",
    "softmax",
]
