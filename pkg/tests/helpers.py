"""Builders shared across test modules."""

import itertools

import numpy as np

from audiocd.audio import tone
from audiocd.backend import DecodeContext, ScriptedBackend

TAGS = ("clean", "absent", "distorted", "negative")


def random_scripted_backend(rng, vocab_size=5, depth=3, n_layers=4, prompt_id="ep"):
    """Full prefix tree up to ``depth`` for every audio tag, with per-layer rows."""
    vocab = ["<eos>"] + [f"w{i}" for i in range(1, vocab_size)]
    table = {}
    for length in range(depth + 1):
        for prefix in itertools.product(range(vocab_size), repeat=length):
            for tag in TAGS:
                layers = [rng.normal(0.0, 2.0, vocab_size) for _ in range(n_layers)]
                table[(tag, prompt_id, prefix)] = (layers[-1], layers)
    return ScriptedBackend(vocab, table, n_layers=n_layers)


def scripted_context(prompt_id="ep"):
    return DecodeContext(audio=tone(300.0, seconds=0.05), prompt=(101, 102), sample_id=prompt_id)
