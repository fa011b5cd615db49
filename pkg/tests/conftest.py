from __future__ import annotations

import numpy as np
import pytest

from spoofcm import synth
from spoofcm.audio import chunk_infer, chunk_train, load_wave
from spoofcm.lfcc import FrontendConfig, extract_features, write_features


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 speakers x 8 utterances, seed 11; shared by trainer/CLI tests."""
    root = tmp_path_factory.mktemp("corpus_small")
    rng = np.random.default_rng(11)
    table = synth.synth_corpus(4, 8, rng, root)
    return {"root": root, "protocol_path": root / synth.PROTOCOL_FILENAME,
            "wav_dir": root / synth.WAV_DIRNAME, "table": table}


def extract_corpus_features(table, wav_dir, out_train, out_infer, seed=0):
    """Train-mode features for the train partition, infer-mode for the rest."""
    config = FrontendConfig()
    out_train.mkdir(parents=True, exist_ok=True)
    out_infer.mkdir(parents=True, exist_ok=True)
    for idx, rec in enumerate(table):
        wave = load_wave(wav_dir / f"{rec.utt_id}.wav")
        if rec.partition == "train":
            chunk = chunk_train(wave, np.random.default_rng([seed, idx]))
            write_features(out_train / f"{rec.utt_id}.lfc",
                           extract_features(chunk, config))
        else:
            chunk = chunk_infer(wave)
            write_features(out_infer / f"{rec.utt_id}.lfc",
                           extract_features(chunk, config))


@pytest.fixture(scope="session")
def small_features(small_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("features_small")
    out_train = root / "train"
    out_infer = root / "infer"
    extract_corpus_features(small_corpus["table"], small_corpus["wav_dir"],
                            out_train, out_infer)
    return {"train": out_train, "infer": out_infer}


@pytest.fixture(scope="session")
def small_store(small_corpus, small_features):
    """Mapping utt_id -> features, routing by partition."""
    from spoofcm.trainer import FeatureDir

    train_dir = FeatureDir(small_features["train"])
    infer_dir = FeatureDir(small_features["infer"])

    class Routed:
        def __init__(self, table):
            self._route = {rec.utt_id: (train_dir if rec.partition == "train"
                                        else infer_dir)
                           for rec in table}

        def __getitem__(self, utt_id):
            return self._route[utt_id][utt_id]

    return Routed(small_corpus["table"])
