"""Amateur construction for each contrastive method and the decode loop.

Every step computes expert logits from the full context, builds amateur
logits according to the method, combines them as
``alpha * expert - beta * amateur``, optionally applies the adaptive
plausibility mask and picks the argmax.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import core
from .audio import distort
from .backend import CapabilityError, DecodeContext, ModelBackend, PrefixCache
from .core import ContrastParams


class Method(str, enum.Enum):
    GREEDY = "GREEDY"
    AAD = "AAD"
    ACD = "ACD"
    AMTI = "AMTI"
    DOLA = "DOLA"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


DEFAULT_NEGATIVE_PROMPT = "Ignore Audio"
DEFAULT_SNR_DB = 5.0

DEFAULT_PARAMS = {
    Method.GREEDY: ContrastParams(alpha=1.0, beta=0.0),
    Method.AAD: ContrastParams(alpha=2.0, beta=1.0),
    Method.ACD: ContrastParams(alpha=2.0, beta=1.0),
    Method.AMTI: ContrastParams(alpha=2.0, beta=1.0),
    Method.DOLA: ContrastParams(alpha=1.0, beta=1.0),
}


class DecodeError(RuntimeError):
    """A backend failure interrupted decoding; carries the partial output."""

    def __init__(self, message, tokens, trace):
        super().__init__(message)
        self.tokens = tokens
        self.trace = trace


@dataclass(frozen=True)
class StrategyConfig:
    method: Method = Method.GREEDY
    contrast: ContrastParams = field(default_factory=ContrastParams)
    noise_snr_db: float = DEFAULT_SNR_DB
    negative_prompt_text: str = DEFAULT_NEGATIVE_PROMPT
    max_new_tokens: int = 16
    eos_token: int = 0
    apc_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")

    @classmethod
    def for_method(cls, method, **overrides) -> "StrategyConfig":
        """Defaults for ``method``: per-method alpha/beta, APC on for ACD and DoLa."""
        m = Method.parse(method)
        kwargs = {
            "method": m,
            "contrast": DEFAULT_PARAMS[m],
            "apc_enabled": m in (Method.ACD, Method.DOLA),
        }
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass(frozen=True)
class GateDecision:
    entropy_value: float
    intervened: bool


@dataclass
class StepTrace:
    step: int
    expert: np.ndarray
    amateur: np.ndarray | None
    combined: np.ndarray
    token: int
    gate: GateDecision | None = None
    layer: int | None = None
    layer_jsd: dict[int, float] | None = None

    def to_json(self) -> dict:
        def row(a):
            return None if a is None else [None if v == -np.inf else float(v) for v in a]

        rec = {
            "step": self.step,
            "token": self.token,
            "expert": row(self.expert),
            "amateur": row(self.amateur),
            "combined": row(self.combined),
        }
        if self.gate is not None:
            rec["entropy"] = self.gate.entropy_value
            rec["intervened"] = self.gate.intervened
        if self.layer is not None:
            rec["layer"] = self.layer
            rec["layer_jsd"] = {str(k): v for k, v in self.layer_jsd.items()}
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "StepTrace":
        def arr(r):
            return None if r is None else np.array([-np.inf if v is None else v for v in r])

        gate = None
        if "intervened" in rec:
            gate = GateDecision(rec["entropy"], rec["intervened"])
        layer_jsd = None
        if "layer" in rec:
            layer_jsd = {int(k): v for k, v in rec["layer_jsd"].items()}
        return cls(
            step=rec["step"],
            expert=arr(rec["expert"]),
            amateur=arr(rec["amateur"]),
            combined=arr(rec["combined"]),
            token=rec["token"],
            gate=gate,
            layer=rec.get("layer"),
            layer_jsd=layer_jsd,
        )


def write_trace(fh, sample_id: str, method: Method, trace: list[StepTrace]) -> None:
    """Append one JSON line per step to an open text file."""
    for st in trace:
        rec = {"sample_id": sample_id, "method": Method.parse(method).value, **st.to_json()}
        fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------
# amateurs
# --------------------------------------------------------------------------


def amateur_aad(backend: ModelBackend, ctx: DecodeContext, seed: int = 0, cache: PrefixCache | None = None):
    """Same prompt and prefix, audio removed."""
    return backend.forward(ctx.without_audio(), seed, cache).logits


def amateur_acd(backend, ctx, snr_db: float, seed: int, cache: PrefixCache | None = None, distorted=None):
    """Same prompt and prefix, audio replaced by a noisy copy.

    ``distorted`` may carry a precomputed ``distort(ctx.audio, snr_db, seed)``.
    """
    if not ctx.has_audio:
        raise ValueError("ACD needs audio in the expert context")
    if snr_db == np.inf:
        return backend.forward(ctx, seed, cache).logits
    if distorted is None:
        distorted = distort(ctx.audio, snr_db, seed)
    return backend.forward(ctx.with_audio(distorted), seed, cache).logits


def amateur_amti(backend, ctx, expert_probs, tau: float, negative_prompt, seed: int = 0, cache: PrefixCache | None = None):
    """Entropy-gated negative-prompt amateur.

    Returns ``(logits or None, GateDecision)``. The negative prompt goes
    after the decoded prefix, so a fork of the expert cache only has to
    encode the negative prompt itself.
    """
    h = core.entropy(expert_probs)
    gate = GateDecision(entropy_value=h, intervened=h > tau)
    if not gate.intervened:
        return None, gate
    amateur_ctx = ctx.with_negative_prompt(negative_prompt)
    return backend.forward(amateur_ctx, seed, cache).logits, gate


def candidate_layers(n_layers: int) -> list[int]:
    """Premature-layer candidates ``N//2, N//2 + 2, ...`` strictly below ``N``.

    Layers are numbered 1..N with layer N the output layer.
    """
    if n_layers < 4:
        raise CapabilityError(f"DoLa needs at least 4 layers, got {n_layers}")
    return list(range(n_layers // 2, n_layers, 2))


def select_layer(expert_logits, layer_logits: dict[int, np.ndarray]) -> tuple[int, dict[int, float]]:
    """Pick the candidate whose distribution is furthest (JSD) from the expert.

    Ties resolve to the lowest layer index.
    """
    ks = sorted(layer_logits)
    p = core.softmax(expert_logits)
    rows = np.stack([core.softmax(layer_logits[k]) for k in ks])
    scores = core.jsd_rows(p, rows)
    best = int(np.argmax(scores))
    return ks[best], {k: float(s) for k, s in zip(ks, scores)}


def amateur_dola(backend: ModelBackend, ctx: DecodeContext, seed: int = 0, output=None):
    """Contrast against the premature layer with maximal JSD.

    ``output`` may be the expert's :class:`ForwardOutput` for this step, which
    already holds the hidden states. Returns ``(logits, layer, layer_jsd)``.
    """
    if not backend.layer_access:
        raise CapabilityError(f"{type(backend).__name__} does not expose hidden states")
    if output is None:
        output = backend.forward(ctx, seed)
    if output.hidden_states is None or len(output.hidden_states) != backend.n_layers:
        raise CapabilityError("backend returned no per-layer hidden states")
    layers = {
        k: backend.project(output.hidden_states[k - 1])
        for k in candidate_layers(backend.n_layers)
    }
    k, scores = select_layer(output.logits, layers)
    return layers[k], k, scores


# --------------------------------------------------------------------------
# decode loop
# --------------------------------------------------------------------------


def decode(backend: ModelBackend, ctx: DecodeContext, cfg: StrategyConfig):
    """Greedy autoregressive decoding under ``cfg.method``.

    Returns ``(tokens, trace)`` with one trace entry per emitted token.
    """
    if ctx.decoded:
        raise ValueError("decode starts from an empty prefix")
    method = cfg.method
    params = cfg.contrast
    expert_cache = PrefixCache()
    amateur_cache = PrefixCache()
    negative = backend.encode(cfg.negative_prompt_text) if method is Method.AMTI else ()
    distorted = None
    if method is Method.ACD:
        if not ctx.has_audio:
            raise ValueError("ACD needs audio in the expert context")
        if cfg.noise_snr_db != np.inf:
            distorted = distort(ctx.audio, cfg.noise_snr_db, cfg.seed)

    tokens: list[int] = []
    trace: list[StepTrace] = []
    for step in range(cfg.max_new_tokens):
        try:
            out = backend.forward(ctx, cfg.seed, expert_cache)
            expert = out.logits
            amateur = None
            gate = None
            layer = None
            layer_jsd = None
            if method is Method.AAD:
                amateur = amateur_aad(backend, ctx, cfg.seed, amateur_cache)
            elif method is Method.ACD:
                amateur = amateur_acd(backend, ctx, cfg.noise_snr_db, cfg.seed, amateur_cache, distorted)
            elif method is Method.AMTI:
                amateur, gate = amateur_amti(
                    backend, ctx, core.softmax(expert), params.tau_entropy, negative,
                    cfg.seed, expert_cache.fork(),
                )
            elif method is Method.DOLA:
                amateur, layer, layer_jsd = amateur_dola(backend, ctx, cfg.seed, out)
        except Exception as exc:
            raise DecodeError(f"backend failure at step {step}: {exc}", tokens, trace) from exc

        if amateur is None:
            combined = expert.copy()
        else:
            combined = core.combine_logits(expert, amateur, params)
            if cfg.apc_enabled:
                combined = core.apc_mask(combined, core.softmax(expert), params.gamma_apc)
        token = core.greedy_select(combined)
        trace.append(StepTrace(step, expert, amateur, combined, token, gate, layer, layer_jsd))
        tokens.append(token)
        ctx = ctx.append(token)
        if token == cfg.eos_token:
            break
    return tokens, trace


def with_beta(cfg: StrategyConfig, beta: float) -> StrategyConfig:
    return replace(cfg, contrast=replace(cfg.contrast, beta=beta))
