"""Desk-scale synthetic bonafide/spoof corpus.

Each speaker is a harmonic series with a speaker-specific fundamental in
100-300 Hz. Spoof utterances run the same generator through one of three
deterministic corruptions:

    T01  phase randomization (harmonic phases re-drawn every 100 ms)
    T02  amplitude quantization buzz (coarse waveform quantizer)
    T03  additive 50 Hz hum

Durations are drawn from 4-14 s with at least one utterance per speaker on
each side of 10 s, so both chunking branches get exercised. The partition
split is speaker-disjoint, roughly 60/20/20 train/dev/eval by utterance.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, save_wave
from .protocol import (BONAFIDE, NOT_APPLICABLE, SPOOF, ProtocolTable,
                       UtteranceRecord, save_protocol)

ATTACK_IDS = ("T01", "T02", "T03")
PROTOCOL_FILENAME = "protocol.txt"
WAV_DIRNAME = "wav"

_N_HARMONICS = 6
_F0_RANGE = (100.0, 300.0)
_NOISE_STD = 0.004
_HUM_AMPLITUDE = 0.18
_QUANT_LEVELS = 3.0
_PHASE_SEGMENT_S = 0.1


def _harmonics(n_samples: int, f0: float, phases: np.ndarray) -> np.ndarray:
    t = np.arange(n_samples) / SAMPLE_RATE
    out = np.zeros(n_samples)
    for h in range(1, _N_HARMONICS + 1):
        out += (0.3 / h) * np.sin(2.0 * np.pi * h * f0 * t + phases[h - 1])
    return out


def _bonafide_signal(n_samples: int, f0: float, rng: np.random.Generator) -> np.ndarray:
    phases = rng.uniform(0.0, 2.0 * np.pi, size=_N_HARMONICS)
    return _harmonics(n_samples, f0, phases)


def _attack_signal(n_samples: int, f0: float, attack_id: str,
                   speaker_seed: int) -> np.ndarray:
    """Corrupted harmonic signal; a pure function of (speaker seed, attack id)."""
    attack_idx = ATTACK_IDS.index(attack_id)
    rng = np.random.default_rng([int(speaker_seed), attack_idx])
    if attack_id == "T01":
        seg = int(_PHASE_SEGMENT_S * SAMPLE_RATE)
        pieces = []
        for start in range(0, n_samples, seg):
            phases = rng.uniform(0.0, 2.0 * np.pi, size=_N_HARMONICS)
            pieces.append(_harmonics(min(seg, n_samples - start), f0, phases))
        return np.concatenate(pieces)
    base = _harmonics(n_samples, f0, rng.uniform(0.0, 2.0 * np.pi, _N_HARMONICS))
    if attack_id == "T02":
        return np.rint(base * _QUANT_LEVELS) / _QUANT_LEVELS
    if attack_id == "T03":
        t = np.arange(n_samples) / SAMPLE_RATE
        hum = _HUM_AMPLITUDE * np.sin(2.0 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
        return base + hum
    raise ValueError(f"unknown attack id {attack_id!r}")


def _split_speakers(n_speakers: int) -> tuple[list[int], list[int], list[int]]:
    if n_speakers == 2:
        # Too few speakers for three disjoint partitions: dev and eval share
        # the second speaker (its utterances are divided between them);
        # train stays speaker-disjoint from both.
        return [0], [1], [1]
    n_train = min(max(1, round(0.6 * n_speakers)), n_speakers - 2)
    n_dev = max(1, round(0.2 * n_speakers))
    if n_train + n_dev > n_speakers - 1:
        n_dev = n_speakers - 1 - n_train
    ids = list(range(n_speakers))
    return ids[:n_train], ids[n_train:n_train + n_dev], ids[n_train + n_dev:]


def _duration_seconds(utt_idx: int, rng: np.random.Generator) -> float:
    # First two utterances pin one duration on each side of the 10 s chunk
    # boundary so every speaker exercises both chunking branches.
    if utt_idx == 0:
        return float(rng.uniform(4.0, 9.5))
    if utt_idx == 1:
        return float(rng.uniform(10.5, 14.0))
    return float(rng.uniform(4.0, 14.0))


def synth_corpus(n_speakers: int, utts_per_speaker: int,
                 rng: np.random.Generator, out_dir) -> ProtocolTable:
    """Generate WAV files plus a protocol file; returns the protocol table."""
    if n_speakers < 2:
        raise ValueError("n_speakers must be >= 2")
    if utts_per_speaker < 4:
        raise ValueError("utts_per_speaker must be >= 4")
    out_dir = Path(out_dir)
    wav_dir = out_dir / WAV_DIRNAME
    wav_dir.mkdir(parents=True, exist_ok=True)

    train_spk, dev_spk, eval_spk = _split_speakers(n_speakers)
    shared_dev_eval = n_speakers == 2

    records = []
    for spk_idx in range(n_speakers):
        speaker_id = f"S{spk_idx + 1:02d}"
        f0 = float(rng.uniform(*_F0_RANGE))
        speaker_seed = int(rng.integers(0, 2**31 - 1))
        if spk_idx in train_spk:
            partition = "train"
        elif shared_dev_eval:
            partition = None  # per-utterance split below
        elif spk_idx in dev_spk:
            partition = "dev"
        else:
            partition = "eval"

        for utt_idx in range(utts_per_speaker):
            utt_id = f"{speaker_id}U{utt_idx + 1:03d}"
            n_samples = int(round(_duration_seconds(utt_idx, rng) * SAMPLE_RATE))
            is_spoof = utt_idx % 2 == 1
            if is_spoof:
                spoof_seq = utt_idx // 2
                attack_id = ATTACK_IDS[(spoof_seq + spk_idx) % len(ATTACK_IDS)]
                signal = _attack_signal(n_samples, f0, attack_id, speaker_seed)
            else:
                attack_id = NOT_APPLICABLE
                signal = _bonafide_signal(n_samples, f0, rng)
            signal = signal + rng.normal(0.0, _NOISE_STD, size=n_samples)
            np.clip(signal, -1.0, 1.0, out=signal)
            save_wave(wav_dir / f"{utt_id}.wav", signal)

            part = partition
            if part is None:
                part = "dev" if utt_idx < utts_per_speaker // 2 else "eval"
            records.append(UtteranceRecord(
                utt_id=utt_id, speaker_id=speaker_id, attack_id=attack_id,
                codec_id=NOT_APPLICABLE,
                label=SPOOF if is_spoof else BONAFIDE, partition=part))

    table = ProtocolTable(records)
    save_protocol(out_dir / PROTOCOL_FILENAME, table)
    return table
