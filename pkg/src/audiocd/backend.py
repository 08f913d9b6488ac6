"""Autoregressive model backends.

A backend maps a :class:`DecodeContext` to next-token logits and, when it
supports layer access, to one hidden state per transformer layer plus a
projection into vocabulary space (final norm followed by the LM head).

Two desk-scale implementations ship here:

* :class:`ScriptedBackend` replays a table of logits keyed by
  ``(audio_tag, prompt_id, prefix)``.
* :class:`SyntheticBackend` is a closed-form audio-language model whose layer
  ``l`` (1-based, ``l = N`` being the output layer) produces
  ``prior + (l / N) * f * evidence`` where ``f`` measures how much of the
  audio survives.

Real model adapters plug in by subclassing :class:`ModelBackend` and
implementing ``_forward`` and (optionally) ``project``.
"""

from __future__ import annotations

import json
import threading
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import AudioInput, measured_snr_db, tone


class CapabilityError(RuntimeError):
    """The backend cannot serve the request (audio input, layer access...)."""


class MissingEntryError(KeyError):
    """A scripted backend has no row for the requested context."""


@dataclass(frozen=True)
class DecodeContext:
    """Everything the model conditions on for one decoding step."""

    audio: AudioInput | None
    prompt: tuple[int, ...]
    decoded: tuple[int, ...] = ()
    negative_prompt: tuple[int, ...] = ()
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "decoded", tuple(int(t) for t in self.decoded))
        object.__setattr__(self, "negative_prompt", tuple(int(t) for t in self.negative_prompt))

    @property
    def has_audio(self) -> bool:
        return self.audio is not None and not self.audio.is_absent

    @property
    def audio_tag(self) -> str:
        if self.negative_prompt:
            return "negative"
        if not self.has_audio:
            return "absent"
        return self.audio.tag

    def append(self, token: int) -> "DecodeContext":
        return replace(self, decoded=self.decoded + (int(token),))

    def without_audio(self) -> "DecodeContext":
        return replace(self, audio=AudioInput.absent())

    def with_audio(self, audio: AudioInput) -> "DecodeContext":
        return replace(self, audio=audio)

    def with_negative_prompt(self, tokens) -> "DecodeContext":
        return replace(self, negative_prompt=tuple(tokens))

    def sequence_key(self) -> tuple:
        audio_key = self.audio.key if self.has_audio else ("absent",)
        return (audio_key, self.sample_id) + self.prompt + self.decoded + self.negative_prompt


@dataclass
class PrefixCache:
    """Stand-in for a KV cache: remembers which token sequence is already encoded.

    A forward pass through a cache only pays for the tokens after the common
    prefix with what the cache already holds.
    """

    key: tuple = ()

    def fork(self) -> "PrefixCache":
        return PrefixCache(self.key)


@dataclass
class ForwardOutput:
    logits: np.ndarray
    hidden_states: list[np.ndarray] | None = None


def _common_prefix(a: tuple, b: tuple) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


@dataclass
class BackendStats:
    forward_calls: Counter = field(default_factory=Counter)
    tokens_processed: int = 0

    @property
    def total_calls(self) -> int:
        return sum(self.forward_calls.values())


class ModelBackend:
    """Base class for pluggable backends."""

    vocab: list[str] = []
    n_layers: int = 0
    layer_access: bool = False
    audio_input: bool = True
    negative_prompt_sentinel: bool = False

    def __init__(self):
        self.stats = BackendStats()
        self._lock = threading.Lock()

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def capabilities(self) -> dict[str, bool]:
        return {
            "layer_access": self.layer_access,
            "audio_input": self.audio_input,
            "negative_prompt_sentinel": self.negative_prompt_sentinel,
        }

    def forward(self, ctx: DecodeContext, seed: int = 0, cache: PrefixCache | None = None) -> ForwardOutput:
        if not ctx.prompt:
            raise ValueError("prompt must be non-empty")
        if ctx.has_audio and not self.audio_input:
            raise CapabilityError(f"{type(self).__name__} does not accept audio")
        seq = ctx.sequence_key()
        if cache is not None:
            processed = len(seq) - _common_prefix(cache.key, seq)
            cache.key = seq
        else:
            processed = len(seq)
        with self._lock:
            self.stats.forward_calls[ctx.audio_tag] += 1
            self.stats.tokens_processed += processed
        out = self._forward(ctx, seed)
        if out.logits.shape != (self.vocab_size,):
            raise ValueError(f"backend returned logits of shape {out.logits.shape}")
        return out

    def _forward(self, ctx: DecodeContext, seed: int) -> ForwardOutput:
        raise NotImplementedError

    def project(self, hidden: np.ndarray) -> np.ndarray:
        """Map a hidden state through the final norm and LM head."""
        raise CapabilityError(f"{type(self).__name__} has no layer access")

    def encode(self, text: str) -> tuple[int, ...]:
        """Word-level stand-in tokenizer for prompts (ids never collide with the output vocab)."""
        return tuple(self.vocab_size + zlib.crc32(w.encode()) for w in text.split())

    def decode_tokens(self, tokens, eos_token: int | None = None) -> str:
        words = [self.vocab[t] for t in tokens if t != eos_token]
        return " ".join(words)

    def reset_stats(self) -> None:
        self.stats = BackendStats()


# --------------------------------------------------------------------------
# scripted backend
# --------------------------------------------------------------------------


class ScriptedBackend(ModelBackend):
    """Table-driven backend; unknown keys raise :class:`MissingEntryError`.

    ``table`` maps ``(audio_tag, prompt_id, prefix_tuple)`` to either a logit
    row or a ``(logits, layer_rows)`` pair where ``layer_rows`` has one row
    per layer and its last row equals ``logits``. Hidden states live directly
    in vocabulary space, so ``project`` is the identity.
    """

    negative_prompt_sentinel = True

    def __init__(self, vocab, table, n_layers: int = 0):
        super().__init__()
        self.vocab = list(vocab)
        self.n_layers = int(n_layers)
        self._table = {}
        for key, value in table.items():
            audio_tag, prompt_id, prefix = key
            if isinstance(value, tuple):
                logits, layers = value
            else:
                logits, layers = value, None
            logits = np.asarray(logits, dtype=np.float64)
            if layers is not None:
                layers = [np.asarray(r, dtype=np.float64) for r in layers]
                if len(layers) != self.n_layers:
                    raise ValueError(f"row {key} has {len(layers)} layers, expected {self.n_layers}")
                if not np.array_equal(layers[-1], logits):
                    raise ValueError(f"row {key}: last layer must equal the output logits")
            self._table[(audio_tag, str(prompt_id), tuple(int(t) for t in prefix))] = (logits, layers)
        self.layer_access = self.n_layers > 0 and all(v[1] is not None for v in self._table.values())

    def _forward(self, ctx, seed):
        key = (ctx.audio_tag, ctx.sample_id, ctx.decoded)
        try:
            logits, layers = self._table[key]
        except KeyError:
            raise MissingEntryError(key) from None
        return ForwardOutput(logits.copy(), None if layers is None else [r.copy() for r in layers])

    def project(self, hidden):
        if not self.layer_access:
            return super().project(hidden)
        return np.asarray(hidden, dtype=np.float64)

    @classmethod
    def load(cls, path) -> "ScriptedBackend":
        """Read a JSON-lines table.

        The first line is a header ``{"vocab": [...], "n_layers": N}``; every
        following line is ``{"audio_tag", "prompt_id", "prefix", "logits"}``
        with an optional ``"layers"`` list. ``null`` in a logit row means a
        masked token.
        """
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            table = {}
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                rec = json.loads(line)
                key = (rec["audio_tag"], rec["prompt_id"], tuple(rec["prefix"]))
                logits = _from_json_row(rec["logits"])
                if "layers" in rec:
                    table[key] = (logits, [_from_json_row(r) for r in rec["layers"]])
                else:
                    table[key] = logits
        return cls(header["vocab"], table, n_layers=header.get("n_layers", 0))

    def dump(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"vocab": self.vocab, "n_layers": self.n_layers}) + "\n")
            for (tag, pid, prefix), (logits, layers) in self._table.items():
                rec = {"audio_tag": tag, "prompt_id": pid, "prefix": list(prefix), "logits": _to_json_row(logits)}
                if layers is not None:
                    rec["layers"] = [_to_json_row(r) for r in layers]
                fh.write(json.dumps(rec) + "\n")


def _from_json_row(row):
    return np.array([-np.inf if v is None else v for v in row], dtype=np.float64)


def _to_json_row(row):
    return [None if v == -np.inf else float(v) for v in row]


# --------------------------------------------------------------------------
# synthetic audio-language model
# --------------------------------------------------------------------------

EOS = "<eos>"
OPTIONS = ("dog", "cat", "bird", "frog")
# Step-0 marker phrases; the mock judge recognises their wording.
MARKERS = {
    "assert": "The answer is",
    "guess": "I'm not sure, I'd guess",
    "no_audio": "No audio was provided, so maybe",
}
SYNTH_VOCAB = [EOS, *MARKERS.values(), *OPTIONS]
EOS_ID = 0
MARKER_IDS = {style: 1 + i for i, style in enumerate(MARKERS)}
OPTION_IDS = {opt: 1 + len(MARKERS) + i for i, opt in enumerate(OPTIONS)}
BACKGROUND = -20.0
SYNTH_AUDIO_SECONDS = 0.1


@dataclass(frozen=True)
class SyntheticItem:
    """A question whose audio evidence may conflict with the language prior.

    ``prior`` and ``evidence`` are logits over :data:`OPTIONS`.
    """

    item_id: str
    prior: tuple[float, ...]
    evidence: tuple[float, ...]
    answer: int
    style: str = "assert"
    conflict: bool = False
    freq_hz: float = 440.0

    def __post_init__(self):
        if int(np.argmax(self.evidence)) != self.answer:
            raise ValueError(f"{self.item_id}: evidence must favour the true answer")
        if self.style not in MARKERS:
            raise ValueError(f"unknown style {self.style!r}")

    @property
    def ground_truth(self) -> str:
        return OPTIONS[self.answer]

    @property
    def question(self) -> str:
        return "Which animal makes the sound in the recording? Options: " + ", ".join(OPTIONS) + "."

    def audio(self) -> AudioInput:
        return tone(self.freq_hz, seconds=SYNTH_AUDIO_SECONDS)

    def to_json(self) -> dict:
        return {
            "id": self.item_id,
            "question": self.question,
            "ground_truth": self.ground_truth,
            "task": "synthetic-conflict" if self.conflict else "synthetic-agree",
            "synthetic": {
                "prior": list(self.prior),
                "evidence": list(self.evidence),
                "answer": self.answer,
                "style": self.style,
                "conflict": self.conflict,
                "freq_hz": self.freq_hz,
            },
        }

    @classmethod
    def from_json(cls, rec: dict) -> "SyntheticItem":
        s = rec["synthetic"]
        return cls(
            item_id=rec["id"],
            prior=tuple(s["prior"]),
            evidence=tuple(s["evidence"]),
            answer=int(s["answer"]),
            style=s["style"],
            conflict=bool(s["conflict"]),
            freq_hz=float(s["freq_hz"]),
        )


def fidelity(snr_db: float) -> float:
    """Fraction of audio evidence that survives noise: ``snr / (1 + snr)``."""
    if snr_db == np.inf:
        return 1.0
    snr = 10.0 ** (snr_db / 10.0)
    return snr / (1.0 + snr)


def evidence_effect(audio: AudioInput | None, item: SyntheticItem, negative_prompt: bool = False) -> np.ndarray:
    """Audio-grounded logit shift over the options, scaled by audio fidelity."""
    ev = np.asarray(item.evidence, dtype=np.float64)
    if negative_prompt or audio is None or audio.is_absent:
        return np.zeros_like(ev)
    if audio.tag == "clean":
        return ev.copy()
    return fidelity(measured_snr_db(item.audio().samples, audio.samples)) * ev


def make_synthetic_dataset(n_items: int, conflict_fraction: float, seed: int) -> list[SyntheticItem]:
    """Build items where exactly ``round(n * conflict_fraction)`` are conflicts.

    In a conflict item the prior favours a wrong option by a margin between
    1.2x and 1.8x the evidence margin, so plain greedy decoding follows the
    prior while ``prior + 2 * evidence`` recovers the true answer.
    """
    if not 0.0 <= conflict_fraction <= 1.0:
        raise ValueError("conflict_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_conflict = int(round(n_items * conflict_fraction))
    is_conflict = np.zeros(n_items, dtype=bool)
    is_conflict[rng.permutation(n_items)[:n_conflict]] = True
    k = len(OPTIONS)
    items = []
    for i in range(n_items):
        answer = int(rng.integers(k))
        ev_margin = float(rng.uniform(1.0, 2.5))
        evidence = np.zeros(k)
        evidence[answer] = ev_margin
        base = float(rng.uniform(0.0, 1.0))
        prior = base - rng.uniform(1.0, 2.0, size=k)
        if is_conflict[i]:
            wrong = int((answer + 1 + rng.integers(k - 1)) % k)
            prior[answer] = base
            prior[wrong] = base + ev_margin * float(rng.uniform(1.2, 1.8))
            style = "guess" if rng.random() < 0.5 else "no_audio"
        else:
            prior[answer] = base + float(rng.uniform(0.0, 1.0))
            style = "assert"
        items.append(
            SyntheticItem(
                item_id=f"syn-{i:04d}",
                prior=tuple(float(x) for x in prior),
                evidence=tuple(float(x) for x in evidence),
                answer=answer,
                style=style,
                conflict=bool(is_conflict[i]),
                freq_hz=float(rng.uniform(200.0, 2000.0)),
            )
        )
    return items


class SyntheticBackend(ModelBackend):
    """Closed-form audio-language model over a fixed 3-token answer template.

    Step 0 emits the item's marker phrase, step 1 the answer option, step 2
    end-of-sequence. Only the answer step carries audio evidence.
    """

    negative_prompt_sentinel = True
    layer_access = True

    def __init__(self, items, n_layers: int = 28):
        super().__init__()
        if n_layers < 1:
            raise ValueError("n_layers must be positive")
        self.vocab = list(SYNTH_VOCAB)
        self.n_layers = int(n_layers)
        self.items = {it.item_id: it for it in items}

    def item(self, sample_id: str) -> SyntheticItem:
        try:
            return self.items[sample_id]
        except KeyError:
            raise MissingEntryError(sample_id) from None

    def components(self, ctx: DecodeContext) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(prior, effective_evidence)`` in vocabulary space for ``ctx``."""
        item = self.item(ctx.sample_id)
        v = self.vocab_size
        prior = np.full(v, BACKGROUND)
        evidence = np.zeros(v)
        step = len(ctx.decoded)
        if step == 0:
            prior[MARKER_IDS[item.style]] = 0.0
        elif step == 1:
            ids = list(OPTION_IDS.values())
            prior[ids] = item.prior
            evidence[ids] = evidence_effect(ctx.audio, item, negative_prompt=bool(ctx.negative_prompt))
        else:
            prior[EOS_ID] = 0.0
        return prior, evidence

    def layer_logits(self, ctx: DecodeContext, layer: int) -> np.ndarray:
        prior, evidence = self.components(ctx)
        return prior + (layer / self.n_layers) * evidence

    def _forward(self, ctx, seed):
        prior, evidence = self.components(ctx)
        n = self.n_layers
        hidden = [prior + (l / n) * evidence for l in range(1, n + 1)]
        return ForwardOutput(hidden[-1].copy(), hidden)

    def project(self, hidden):
        return np.asarray(hidden, dtype=np.float64)

    def prompt_tokens(self, sample_id: str) -> tuple[int, ...]:
        return self.encode(self.item(sample_id).question)
