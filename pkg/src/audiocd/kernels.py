"""Vocabulary-space kernels in two flavours.

``NUMBA`` holds loop-style kernels compiled with ``numba.njit``; ``NUMPY``
holds vectorised equivalents. Both namespaces expose the same functions with
the same semantics, and ``ACTIVE`` is the one picked at import time (see
``audiocd._jit``). Inputs are assumed validated by the callers in
``audiocd.core``.
"""

from types import SimpleNamespace

import numpy as np

from ._jit import JIT_ENABLED, njit

KL_FLOOR = 1e-12


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------


@njit
def _combine_nb(expert, amateur, alpha, beta):
    out = np.empty(expert.shape[0])
    for i in range(expert.shape[0]):
        if expert[i] == -np.inf:
            out[i] = -np.inf
        else:
            out[i] = alpha * expert[i] - beta * amateur[i]
    return out


@njit
def _softmax_nb(logits):
    n = logits.shape[0]
    m = -np.inf
    for i in range(n):
        if logits[i] > m:
            m = logits[i]
    out = np.empty(n)
    total = 0.0
    for i in range(n):
        if logits[i] == -np.inf:
            out[i] = 0.0
        else:
            out[i] = np.exp(logits[i] - m)
            total += out[i]
    for i in range(n):
        out[i] /= total
    return out


@njit
def _entropy_nb(probs):
    h = 0.0
    for i in range(probs.shape[0]):
        p = probs[i]
        if p > 0.0:
            h -= p * np.log(p)
    return h


@njit
def _jsd_nb(p, q, floor):
    kl_p = 0.0
    kl_q = 0.0
    for i in range(p.shape[0]):
        m = 0.5 * (p[i] + q[i])
        if p[i] >= floor:
            kl_p += p[i] * (np.log(p[i]) - np.log(m))
        if q[i] >= floor:
            kl_q += q[i] * (np.log(q[i]) - np.log(m))
    d = 0.5 * (kl_p + kl_q)
    if d < 0.0:
        d = 0.0
    return d


@njit
def _jsd_rows_nb(p, rows, floor):
    out = np.empty(rows.shape[0])
    for r in range(rows.shape[0]):
        out[r] = _jsd_nb(p, rows[r], floor)
    return out


@njit
def _apc_mask_nb(combined, expert_probs, gamma):
    pmax = 0.0
    for i in range(expert_probs.shape[0]):
        if expert_probs[i] > pmax:
            pmax = expert_probs[i]
    cutoff = gamma * pmax
    out = combined.copy()
    for i in range(out.shape[0]):
        if expert_probs[i] < cutoff:
            out[i] = -np.inf
    return out


@njit
def _argmax_nb(logits):
    best = -1
    best_val = -np.inf
    for i in range(logits.shape[0]):
        if logits[i] > best_val:
            best_val = logits[i]
            best = i
    return best


# --------------------------------------------------------------------------
# numpy kernels
# --------------------------------------------------------------------------


def _combine_np(expert, amateur, alpha, beta):
    masked = expert == -np.inf
    safe_amateur = np.where(masked, 0.0, amateur)
    safe_expert = np.where(masked, 0.0, expert)
    out = alpha * safe_expert - beta * safe_amateur
    out[masked] = -np.inf
    return out


def _softmax_np(logits):
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def _entropy_np(probs):
    nz = probs[probs > 0.0]
    return float(-(nz * np.log(nz)).sum())


def _kl_to_mid(p, m, floor):
    keep = p >= floor
    return float((p[keep] * (np.log(p[keep]) - np.log(m[keep]))).sum())


def _jsd_np(p, q, floor):
    m = 0.5 * (p + q)
    d = 0.5 * (_kl_to_mid(p, m, floor) + _kl_to_mid(q, m, floor))
    return max(d, 0.0)


def _jsd_rows_np(p, rows, floor):
    m = 0.5 * (p[None, :] + rows)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_m = np.log(m)
        tp = np.where(p >= floor, p * (np.log(np.where(p > 0, p, 1.0)) - log_m), 0.0)
        tq = np.where(rows >= floor, rows * (np.log(np.where(rows > 0, rows, 1.0)) - log_m), 0.0)
    return np.maximum(0.5 * (tp.sum(axis=1) + tq.sum(axis=1)), 0.0)


def _apc_mask_np(combined, expert_probs, gamma):
    out = combined.copy()
    out[expert_probs < gamma * expert_probs.max()] = -np.inf
    return out


def _argmax_np(logits):
    i = int(np.argmax(logits))
    return -1 if logits[i] == -np.inf else i


NUMBA = SimpleNamespace(
    name="numba" if JIT_ENABLED else "numba-disabled",
    combine=_combine_nb,
    softmax=_softmax_nb,
    entropy=_entropy_nb,
    jsd=_jsd_nb,
    jsd_rows=_jsd_rows_nb,
    apc_mask=_apc_mask_nb,
    argmax=_argmax_nb,
)

NUMPY = SimpleNamespace(
    name="numpy",
    combine=_combine_np,
    softmax=_softmax_np,
    entropy=_entropy_np,
    jsd=_jsd_np,
    jsd_rows=_jsd_rows_np,
    apc_mask=_apc_mask_np,
    argmax=_argmax_np,
)

ACTIVE = NUMBA if JIT_ENABLED else NUMPY
