"""Logit-space math shared by every decoding strategy.

All functions take and return 1-D float64 numpy arrays over the vocabulary.
Masked tokens carry ``-inf``. The heavy lifting is done by the kernels in
:mod:`audiocd.kernels`; this module validates inputs and picks the
implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import KL_FLOOR

DEFAULT_GAMMA = 0.1
DEFAULT_TAU = 1.0


class DimensionError(ValueError):
    """Two vocabulary vectors disagree in length."""


class DegenerateDistributionError(ValueError):
    """Every entry of a logit vector is masked."""


@dataclass(frozen=True)
class ContrastParams:
    """Strength of the expert/amateur contrast plus gating thresholds.

    ``gamma_apc`` is the plausibility cutoff as a fraction of the top expert
    probability; ``tau_entropy`` is the entropy gate in nats.
    """

    alpha: float = 2.0
    beta: float = 1.0
    gamma_apc: float = DEFAULT_GAMMA
    tau_entropy: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.gamma_apc <= 1.0:
            raise ValueError(f"gamma_apc must lie in [0, 1], got {self.gamma_apc}")
        if self.tau_entropy < 0:
            raise ValueError(f"tau_entropy must be >= 0, got {self.tau_entropy}")


def _vec(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def _require_finite_entry(logits: np.ndarray) -> None:
    if logits.size == 0 or not np.isfinite(logits).any():
        raise DegenerateDistributionError("all logits are masked")


def combine_logits(expert, amateur, params: ContrastParams) -> np.ndarray:
    """Return ``alpha * expert - beta * amateur``; masked expert entries stay masked."""
    z, zh = _vec(expert), _vec(amateur)
    _same_length(z, zh)
    live = np.isfinite(z)
    if not np.isfinite(zh[live]).all():
        raise ValueError("amateur logits must be finite wherever expert logits are")
    return kernels.ACTIVE.combine(z, zh, float(params.alpha), float(params.beta))


def softmax(logits) -> np.ndarray:
    z = _vec(logits)
    _require_finite_entry(z)
    return kernels.ACTIVE.softmax(z)


def entropy(probs) -> float:
    """Shannon entropy in nats, with ``0 * ln 0 = 0``."""
    return float(kernels.ACTIVE.entropy(_vec(probs)))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats (bounded by ln 2)."""
    pv, qv = _vec(p), _vec(q)
    _same_length(pv, qv)
    return float(kernels.ACTIVE.jsd(pv, qv, KL_FLOOR))


def jsd_rows(p, rows) -> np.ndarray:
    """JSD between ``p`` and every row of a 2-D array of distributions."""
    pv = _vec(p)
    r = np.ascontiguousarray(np.asarray(rows, dtype=np.float64))
    if r.ndim != 2 or r.shape[1] != pv.shape[0]:
        raise DimensionError(f"rows shape {r.shape} incompatible with length {pv.shape[0]}")
    return kernels.ACTIVE.jsd_rows(pv, r, KL_FLOOR)


def apc_mask(combined, expert_probs, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Mask tokens whose expert probability falls below ``gamma * max``.

    The expert's top token always survives because ``gamma <= 1``.
    """
    c, p = _vec(combined), _vec(expert_probs)
    _same_length(c, p)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return kernels.ACTIVE.apc_mask(c, p, float(gamma))


def greedy_select(logits) -> int:
    """Argmax with ties going to the lowest token id."""
    z = _vec(logits)
    _require_finite_entry(z)
    return int(kernels.ACTIVE.argmax(z))


def backend_name() -> str:
    return kernels.ACTIVE.name
