from __future__ import annotations

import hashlib
import wave as wavemod
from pathlib import Path

import numpy as np
import pytest

from spoofcm.audio import SAMPLE_RATE
from spoofcm.protocol import BONAFIDE, PARTITIONS, SPOOF, load_protocol
from spoofcm.synth import ATTACK_IDS, PROTOCOL_FILENAME, WAV_DIRNAME, synth_corpus


def _dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_determinism_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_corpus(4, 10, np.random.default_rng(7), a)
    synth_corpus(4, 10, np.random.default_rng(7), b)
    assert _dir_digest(a) == _dir_digest(b)


def test_both_labels_in_every_partition(tmp_path):
    for n_spk, n_utt, seed in [(2, 4, 0), (3, 5, 1), (8, 6, 2)]:
        out = tmp_path / f"c{n_spk}_{seed}"
        table = synth_corpus(n_spk, n_utt, np.random.default_rng(seed), out)
        for partition in PARTITIONS:
            labels = {r.label for r in table.for_partition(partition)}
            assert labels == {BONAFIDE, SPOOF}, (partition, n_spk)


def test_durations_span_chunk_boundary(tmp_path):
    out = tmp_path / "c"
    table = synth_corpus(3, 6, np.random.default_rng(5), out)
    below = above = 0
    for rec in table:
        with wavemod.open(str(out / WAV_DIRNAME / f"{rec.utt_id}.wav")) as fh:
            seconds = fh.getnframes() / SAMPLE_RATE
        if seconds < 10.0:
            below += 1
        else:
            above += 1
    assert below > 0 and above > 0


def test_speaker_disjoint_partitions(tmp_path):
    table = synth_corpus(8, 4, np.random.default_rng(9), tmp_path / "c")
    per_partition = {p: set(table.speakers(p)) for p in PARTITIONS}
    assert not per_partition["train"] & per_partition["dev"]
    assert not per_partition["train"] & per_partition["eval"]
    assert not per_partition["dev"] & per_partition["eval"]


def test_two_speaker_corpus_keeps_train_disjoint(tmp_path):
    table = synth_corpus(2, 8, np.random.default_rng(1), tmp_path / "c")
    train = set(table.speakers("train"))
    assert not train & set(table.speakers("dev"))
    assert not train & set(table.speakers("eval"))


def test_protocol_file_round_trips(tmp_path):
    out = tmp_path / "c"
    table = synth_corpus(3, 4, np.random.default_rng(2), out)
    assert load_protocol(out / PROTOCOL_FILENAME) == table


def test_attack_ids_and_invariants(tmp_path):
    table = synth_corpus(6, 8, np.random.default_rng(3), tmp_path / "c")
    spoof_attacks = {r.attack_id for r in table if r.label == SPOOF}
    assert spoof_attacks <= set(ATTACK_IDS)
    assert len(spoof_attacks) == len(ATTACK_IDS)
    for rec in table:
        if rec.label == BONAFIDE:
            assert rec.attack_id == "-"
        assert rec.codec_id == "-"
        assert (tmp_path / "c" / WAV_DIRNAME / f"{rec.utt_id}.wav").exists()


def test_preconditions():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        synth_corpus(1, 8, rng, "/tmp/never")
    with pytest.raises(ValueError):
        synth_corpus(4, 3, rng, "/tmp/never")
