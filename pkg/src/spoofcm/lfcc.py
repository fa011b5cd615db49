"""Linear-frequency cepstral front-end.

A 10 s chunk (160000 samples) becomes exactly 1000 frames of 120
coefficients: 40 static cepstra from a linearly spaced triangular
filterbank, plus delta and delta-delta. The waveform is right-padded with
160 zeros so the 20 ms / 10 ms framing yields ceil(160000 / 160) = 1000
frames. Window function, log floor, c0 policy and the orthonormal DCT-II
are pinned here via FrontendConfig.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .audio import CHUNK_SAMPLES, SAMPLE_RATE

FEATURE_MAGIC = b"LFC1"


@dataclass(frozen=True)
class FrontendConfig:
    win_ms: float = 20.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_filters: int = 40
    n_ceps: int = 40
    delta_width: int = 2
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.n_ceps > self.n_filters:
            raise ValueError("n_ceps must be <= n_filters")
        if self.n_fft < self.win_samples(SAMPLE_RATE):
            raise ValueError("n_fft must be >= window length in samples")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def win_samples(self, sample_rate: int) -> int:
        return int(round(self.win_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))


@dataclass
class FilterBank:
    """Triangular filters on FFT bins, linearly spaced over [0, Nyquist].

    n_filters+2 edge frequencies define overlapping triangles; triangle k
    spans edges (k, k+2) with peak 1 at edge k+1, edges snapped to the
    nearest FFT bin.
    """

    weights: np.ndarray        # (n_filters, n_fft//2 + 1)
    center_bins: np.ndarray    # (n_filters,) peak bin per filter
    start_bins: np.ndarray     # (n_filters,) left edge bin
    end_bins: np.ndarray       # (n_filters,) right edge bin
    center_freqs_hz: np.ndarray  # ideal (pre-snap) peak frequencies


def build_filterbank(config: FrontendConfig, sample_rate: int) -> FilterBank:
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz, got {sample_rate}")
    n_bins = config.n_fft // 2 + 1
    nyquist = sample_rate / 2.0
    edges_hz = np.linspace(0.0, nyquist, config.n_filters + 2)
    edge_bins = np.rint(edges_hz / (sample_rate / config.n_fft)).astype(int)

    weights = np.zeros((config.n_filters, n_bins))
    for k in range(config.n_filters):
        lo, mid, hi = edge_bins[k], edge_bins[k + 1], edge_bins[k + 2]
        if mid > lo:
            for b in range(lo, mid):
                weights[k, b] = (b - lo) / (mid - lo)
        if hi > mid:
            for b in range(mid + 1, hi + 1):
                weights[k, b] = (hi - b) / (hi - mid)
        weights[k, mid] = 1.0
    return FilterBank(
        weights=weights,
        center_bins=edge_bins[1:-1].copy(),
        start_bins=edge_bins[:-2].copy(),
        end_bins=edge_bins[2:].copy(),
        center_freqs_hz=edges_hz[1:-1].copy(),
    )


def _frame(chunk: np.ndarray, config: FrontendConfig) -> np.ndarray:
    win = config.win_samples(SAMPLE_RATE)
    hop = config.hop_samples(SAMPLE_RATE)
    padded = np.concatenate([chunk, np.zeros(hop)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop]
    return frames * np.hamming(win)


def power_frames(chunk: np.ndarray, config: FrontendConfig) -> np.ndarray:
    """Per-frame power spectrum, shape (n_frames, n_fft//2 + 1)."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape != (CHUNK_SAMPLES,):
        raise ValueError(f"expected chunk of {CHUNK_SAMPLES} samples, got {chunk.shape}")
    spectrum = np.fft.rfft(_frame(chunk, config), n=config.n_fft)
    return np.abs(spectrum) ** 2


def filterbank_energies(chunk: np.ndarray, config: FrontendConfig,
                        bank: FilterBank | None = None) -> np.ndarray:
    """Pre-log filterbank energies, shape (n_frames, n_filters)."""
    if bank is None:
        bank = build_filterbank(config, SAMPLE_RATE)
    # einsum keeps the per-element reduction order fixed regardless of the
    # BLAS thread count, so feature files are bit-reproducible.
    return np.einsum("tb,fb->tf", power_frames(chunk, config), bank.weights)


def extract_lfcc(chunk: np.ndarray, config: FrontendConfig) -> np.ndarray:
    """Static cepstra: log filterbank energies through an orthonormal DCT-II."""
    energies = filterbank_energies(chunk, config)
    log_e = np.log(np.maximum(energies, config.log_floor))
    ceps = dct(log_e, type=2, norm="ortho", axis=1)
    return ceps[:, :config.n_ceps]


def compute_deltas(m: np.ndarray, width: int) -> np.ndarray:
    """Regression deltas with edge replication for out-of-range frames."""
    m = np.asarray(m, dtype=np.float64)
    frames = m.shape[0]
    if frames <= 2 * width:
        raise ValueError(f"need more than {2 * width} frames, got {frames}")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    padded = np.concatenate([
        np.repeat(m[:1], width, axis=0), m, np.repeat(m[-1:], width, axis=0)])
    out = np.zeros_like(m)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + frames]
                    - padded[width - n:width - n + frames])
    return out / denom


def extract_features(chunk: np.ndarray, config: FrontendConfig) -> np.ndarray:
    """[static | delta | delta-delta], shape (1000, 120) for a 10 s chunk."""
    static = extract_lfcc(chunk, config)
    d1 = compute_deltas(static, config.delta_width)
    d2 = compute_deltas(d1, config.delta_width)
    return np.concatenate([static, d1, d2], axis=1)


def write_features(path, m: np.ndarray) -> None:
    """Feature file: magic LFC1, uint32 LE rows/cols, row-major float32 LE."""
    m = np.asarray(m)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"bad feature file magic {magic!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        payload = fh.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise ValueError(f"feature payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
