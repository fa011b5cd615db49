"""Waveform ingestion and the 10 s chunk policy.

All audio is RIFF/WAVE, PCM 16-bit, mono, 16 kHz. Integer samples map to
reals by division by 32768. Every chunk is exactly 160000 samples (10 s):
training uses a random crop of long waves, inference always takes the
prefix; short waves are tiled end-to-end in both modes.
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
CHUNK_SAMPLES = 160000  # 10 s at 16 kHz
_PCM_SCALE = 32768.0


class AudioFormatError(ValueError):
    """Unsupported audio file; names the offending field."""

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.samples)


def load_wave(path) -> WaveBuffer:
    """Read a PCM16 mono 16 kHz WAV file into a [-1, 1] float buffer."""
    with _wave.open(str(path), "rb") as fh:
        if fh.getcomptype() != "NONE":
            raise AudioFormatError("encoding", f"expected PCM, got {fh.getcomptype()!r}")
        if fh.getsampwidth() != 2:
            raise AudioFormatError(
                "sample_width", f"expected 2 bytes (16-bit), got {fh.getsampwidth()}")
        if fh.getnchannels() != 1:
            raise AudioFormatError(
                "channels", f"expected mono, got {fh.getnchannels()} channels")
        if fh.getframerate() != SAMPLE_RATE:
            raise AudioFormatError(
                "sample_rate", f"expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
        n = fh.getnframes()
        raw = fh.readframes(n)
    if n < 1:
        raise AudioFormatError("length", "empty audio file")
    ints = np.frombuffer(raw, dtype="<i2")
    return WaveBuffer(ints.astype(np.float64) / _PCM_SCALE)


def save_wave(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as PCM16 mono little-endian."""
    x = np.asarray(samples, dtype=np.float64)
    ints = np.clip(np.rint(x * _PCM_SCALE), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(ints.tobytes())


def _tile_to_chunk(samples: np.ndarray) -> np.ndarray:
    reps = -(-CHUNK_SAMPLES // len(samples))  # ceil division
    return np.tile(samples, reps)[:CHUNK_SAMPLES]


def chunk_train(wave: WaveBuffer, rng: np.random.Generator) -> np.ndarray:
    """Random 10 s crop of a long wave; short waves are tiled and truncated."""
    n = len(wave)
    if n < 1:
        raise ValueError("empty wave")
    if n > CHUNK_SAMPLES:
        offset = int(rng.integers(0, n - CHUNK_SAMPLES + 1))
        return wave.samples[offset:offset + CHUNK_SAMPLES].copy()
    return _tile_to_chunk(wave.samples)


def chunk_infer(wave: WaveBuffer) -> np.ndarray:
    """First 10 s of a long wave; short waves are tiled. Fully deterministic."""
    n = len(wave)
    if n < 1:
        raise ValueError("empty wave")
    if n >= CHUNK_SAMPLES:
        return wave.samples[:CHUNK_SAMPLES].copy()
    return _tile_to_chunk(wave.samples)
