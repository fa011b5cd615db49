from __future__ import annotations

import wave as wavemod

import numpy as np
import pytest

from spoofcm.audio import (CHUNK_SAMPLES, AudioFormatError, WaveBuffer,
                           chunk_infer, chunk_train, load_wave, save_wave)


def _write_raw_wav(path, n_frames, rate=16000, channels=1, width=2):
    with wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(b"\x00" * (n_frames * channels * width))


def test_load_wave_length_passthrough(tmp_path):
    path = tmp_path / "a.wav"
    _write_raw_wav(path, 16000)
    assert len(load_wave(path)) == 16000


def test_load_wave_rejects_wrong_rate(tmp_path):
    path = tmp_path / "a.wav"
    _write_raw_wav(path, 100, rate=44100)
    with pytest.raises(AudioFormatError) as err:
        load_wave(path)
    assert err.value.field == "sample_rate"


def test_load_wave_rejects_stereo_and_8bit(tmp_path):
    stereo = tmp_path / "stereo.wav"
    _write_raw_wav(stereo, 100, channels=2)
    with pytest.raises(AudioFormatError) as err:
        load_wave(stereo)
    assert err.value.field == "channels"

    eight = tmp_path / "eight.wav"
    _write_raw_wav(eight, 100, width=1)
    with pytest.raises(AudioFormatError) as err:
        load_wave(eight)
    assert err.value.field == "sample_width"


def test_load_wave_rejects_empty(tmp_path):
    path = tmp_path / "empty.wav"
    _write_raw_wav(path, 0)
    with pytest.raises(AudioFormatError) as err:
        load_wave(path)
    assert err.value.field == "length"


def test_pcm_scaling_extremes(tmp_path):
    path = tmp_path / "ext.wav"
    with wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(np.array([-32768, 32767, 0], dtype="<i2").tobytes())
    buf = load_wave(path)
    assert buf.samples[0] == -1.0
    assert buf.samples[1] == 32767 / 32768
    assert buf.samples[2] == 0.0


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.9, 0.9, size=1234)
    path = tmp_path / "rt.wav"
    save_wave(path, x)
    back = load_wave(path)
    assert len(back) == 1234
    assert np.max(np.abs(back.samples - x)) <= 0.5 / 32768


def test_chunk_train_identity_at_exact_length():
    wave = WaveBuffer(np.arange(CHUNK_SAMPLES, dtype=float) / CHUNK_SAMPLES)
    for seed in (0, 1, 99):
        out = chunk_train(wave, np.random.default_rng(seed))
        assert np.array_equal(out, wave.samples)


def test_chunk_train_tiles_short_input():
    wave = WaveBuffer(np.arange(80000, dtype=float))
    out = chunk_train(wave, np.random.default_rng(0))
    assert out.shape == (CHUNK_SAMPLES,)
    idx = np.arange(CHUNK_SAMPLES)
    assert np.array_equal(out, wave.samples[idx % 80000])


def test_chunk_train_deterministic_given_seed():
    wave = WaveBuffer(np.random.default_rng(3).normal(size=200000))
    a = chunk_train(wave, np.random.default_rng(7))
    b = chunk_train(wave, np.random.default_rng(7))
    assert np.array_equal(a, b)
    # and the crop is a contiguous window
    c = chunk_train(wave, np.random.default_rng(8))
    assert c.shape == (CHUNK_SAMPLES,)


def test_chunk_train_length_property():
    rng = np.random.default_rng(42)
    lengths = [1, 2, 159999, 160000, 160001, 500000]
    lengths += [int(v) for v in rng.integers(1, 500001, size=20)]
    for n in lengths:
        wave = WaveBuffer(rng.normal(size=n))
        out = chunk_train(wave, rng)
        assert out.shape == (CHUNK_SAMPLES,)


def test_chunk_infer_prefix_and_tiling():
    long = WaveBuffer(np.arange(192000, dtype=float))
    assert np.array_equal(chunk_infer(long), long.samples[:CHUNK_SAMPLES])

    short = WaveBuffer(np.arange(64000, dtype=float))
    out = chunk_infer(short)
    idx = np.arange(CHUNK_SAMPLES)
    assert np.array_equal(out, short.samples[idx % 64000])

    exact = WaveBuffer(np.arange(CHUNK_SAMPLES, dtype=float))
    assert np.array_equal(chunk_infer(exact), exact.samples)


def test_chunk_infer_idempotent():
    rng = np.random.default_rng(5)
    for n in [1, 777, 64000, 160000, 300000]:
        wave = WaveBuffer(rng.normal(size=n))
        once = chunk_infer(wave)
        twice = chunk_infer(WaveBuffer(once))
        assert np.array_equal(once, twice)


def test_empty_wave_rejected():
    empty = WaveBuffer(np.array([]))
    with pytest.raises(ValueError):
        chunk_train(empty, np.random.default_rng(0))
    with pytest.raises(ValueError):
        chunk_infer(empty)
