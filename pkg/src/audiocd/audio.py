"""Waveform loading and Gaussian-noise distortion."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class AudioFormatError(ValueError):
    """The WAV file is malformed or uses an unsupported encoding."""


class DegenerateSignalError(ValueError):
    """The signal carries no power, so an SNR is undefined."""


@dataclass(frozen=True, eq=False)
class AudioInput:
    """Mono waveform in [-1, 1].

    ``tag`` is ``"clean"``, ``"distorted"`` or ``"absent"``; distorted audio
    also records the SNR and seed that produced it.
    """

    samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample_rate: int = 16000
    tag: str = "clean"
    snr_db: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.tag not in ("clean", "distorted", "absent"):
            raise ValueError(f"unknown audio tag {self.tag!r}")
        if self.tag == "absent" and len(self.samples):
            raise ValueError("absent audio must not carry samples")
        if len(self.samples) and self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @classmethod
    def absent(cls) -> "AudioInput":
        return cls(samples=np.zeros(0), tag="absent")

    @property
    def is_absent(self) -> bool:
        return self.tag == "absent"

    @property
    def key(self) -> tuple:
        """Hashable identity used for cache bookkeeping and table lookups."""
        if self.tag == "distorted":
            return ("distorted", self.snr_db, self.seed)
        return (self.tag,)

    def __len__(self) -> int:
        return len(self.samples)


def load_wav(path) -> AudioInput:
    """Read a 16-bit PCM mono WAV file into an :class:`AudioInput`."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    pcm = np.frombuffer(frames, dtype="<i2").astype(np.float64)
    return AudioInput(samples=pcm / 32768.0, sample_rate=rate, tag="clean")


def write_wav(path, audio: AudioInput) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


def signal_power(samples) -> float:
    s = np.asarray(samples, dtype=np.float64)
    return float(np.mean(s * s)) if s.size else 0.0


def measured_snr_db(clean, noisy) -> float:
    """SNR of ``noisy`` against its clean reference, in dB."""
    noise = signal_power(np.asarray(noisy) - np.asarray(clean))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_power(clean) / noise)


def distort(audio: AudioInput, snr_db: float, seed: int) -> AudioInput:
    """Add white Gaussian noise at ``snr_db`` relative to the signal power.

    Noise is drawn from ``numpy.random.default_rng(seed)`` so the output is
    reproducible; the result is clipped back into [-1, 1].
    """
    if audio.tag != "clean":
        raise ValueError(f"can only distort clean audio, got tag {audio.tag!r}")
    power = signal_power(audio.samples)
    if power == 0.0:
        raise DegenerateSignalError("cannot distort a zero-power signal")
    noise_power = power / 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(len(audio.samples)) * math.sqrt(noise_power)
    noisy = np.clip(audio.samples + noise, -1.0, 1.0)
    return AudioInput(
        samples=noisy,
        sample_rate=audio.sample_rate,
        tag="distorted",
        snr_db=float(snr_db),
        seed=int(seed),
    )


def tone(freq_hz: float, seconds: float = 1.0, sample_rate: int = 16000, amplitude: float = 0.5) -> AudioInput:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioInput(samples=amplitude * np.sin(2 * np.pi * freq_hz * t), sample_rate=sample_rate)
