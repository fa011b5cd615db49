"""Command-line surface.

Subcommands mirror the pipeline: synth -> extract -> train -> score ->
eval, plus fuse train/apply. Every command writes a JSON run manifest next
to its outputs (atomically); outputs are byte-reproducible for identical
flags and seed, manifests may differ only in wall-clock fields.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .audio import chunk_infer, chunk_train, load_wave
from .embedder import ModelConfig, embed
from .fusion import (align_scores, apply_fusion, load_fusion, save_fusion,
                     train_fusion)
from .lfcc import FrontendConfig, extract_features, write_features
from .losses import SamoConfig, samo_init_attractors
from .metrics import (DcfParams, ScoreSet, breakdown, det_curve, eer,
                      histogram, join_labels, min_dcf, read_scores,
                      write_breakdown_csv, write_histogram_csv, write_scores,
                      write_summary_json)
from .protocol import BONAFIDE, PARTITIONS, load_protocol
from .synth import PROTOCOL_FILENAME, WAV_DIRNAME, synth_corpus
from .trainer import (FeatureDir, TrainConfig, load_checkpoint,
                      save_checkpoint, score_records, train)


class UsageError(Exception):
    pass


def _write_json_atomic(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest(path: Path, command: str, args: argparse.Namespace,
                    started: float, inputs: dict, outputs: dict) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v)
              for k, v in sorted(vars(args).items()) if k != "func"}
    _write_json_atomic(path, {
        "manifest_version": 1,
        "tool": "spoofcm",
        "tool_version": __version__,
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_sec": time.time() - started,
    })


def _frontend_from_args(args) -> FrontendConfig:
    return FrontendConfig(win_ms=args.win_ms, hop_ms=args.hop_ms,
                          n_fft=args.n_fft, n_filters=args.n_filters,
                          n_ceps=args.n_ceps)


def cmd_synth(args) -> int:
    started = time.time()
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    table = synth_corpus(args.speakers, args.utts, rng, out)
    _write_manifest(out / "manifest.json", "synth", args, started,
                    inputs={},
                    outputs={"protocol": str(out / PROTOCOL_FILENAME),
                             "wav_dir": str(out / WAV_DIRNAME),
                             "n_records": len(table)})
    print(f"wrote {len(table)} utterances under {out}")
    return 0


def cmd_extract(args) -> int:
    started = time.time()
    protocol = load_protocol(args.protocol)
    audio_dir = Path(args.audio_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _frontend_from_args(args)
    partitions = args.partition or list(PARTITIONS)

    records = [(idx, rec) for idx, rec in enumerate(protocol)
               if rec.partition in partitions]
    missing = [audio_dir / f"{rec.utt_id}.wav" for _, rec in records
               if not (audio_dir / f"{rec.utt_id}.wav").exists()]
    if missing:
        for path in missing:
            print(f"missing audio: {path}", file=sys.stderr)
        return 1

    for idx, rec in records:
        wave = load_wave(audio_dir / f"{rec.utt_id}.wav")
        if args.mode == "train":
            # Child seed keyed by protocol position: reproducible at any
            # parallelism level and independent of the partition filter.
            chunk = chunk_train(wave, np.random.default_rng([args.seed, idx]))
        else:
            chunk = chunk_infer(wave)
        write_features(out / f"{rec.utt_id}.lfc", extract_features(chunk, config))

    _write_manifest(out / "manifest.json", "extract", args, started,
                    inputs={"protocol": str(args.protocol),
                            "audio_dir": str(audio_dir)},
                    outputs={"feature_dir": str(out),
                             "n_files": len(records)})
    print(f"extracted {len(records)} feature files into {out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    samo_flags = {
        "--samo-update-interval": args.samo_update_interval,
        "--samo-maxscore": args.samo_maxscore or None,
        "--samo-enroll/--no-samo-enroll": args.samo_enroll,
    }
    if args.loss != "samo":
        given = [name for name, v in samo_flags.items() if v is not None]
        if given:
            raise UsageError(
                f"{', '.join(given)} only apply to --loss samo")
        samo = SamoConfig()
    else:
        samo = SamoConfig(
            update_interval=args.samo_update_interval or 1,
            maxscore=bool(args.samo_maxscore),
            use_enrollment=True if args.samo_enroll is None else args.samo_enroll,
            weighted=args.weighted)
    model = ModelConfig(use_amff=args.amff)
    return TrainConfig(base_lr=args.lr, epochs=args.epochs,
                       batch_size=args.batch_size, loss=args.loss, samo=samo,
                       seed=args.seed, model=model, weighted=args.weighted)


def cmd_train(args) -> int:
    started = time.time()
    config = _train_config_from_args(args)
    protocol = load_protocol(args.protocol)
    train_store = FeatureDir(args.features_train)
    dev_store = FeatureDir(args.features_dev)

    class _Routed:
        def __init__(self, protocol, train_store, dev_store):
            self._route = {rec.utt_id: (train_store if rec.partition == "train"
                                        else dev_store)
                           for rec in protocol}

        def __getitem__(self, utt_id):
            return self._route[utt_id][utt_id]

    features = _Routed(protocol, train_store, dev_store)

    def report(stats):
        print(f"epoch {stats.epoch:3d}  lr {stats.lr:.3e}  "
              f"loss {stats.mean_loss:.6f}  dev_eer {stats.dev_eer:.4f}  "
              f"dev_mindcf {stats.dev_min_dcf:.4f}  "
              f"best {stats.best_min_dcf:.4f}@{stats.best_epoch}")

    ckpt = train(protocol, features, config, on_epoch=report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prefix = out / "model"
    save_checkpoint(prefix, ckpt)
    _write_manifest(out / "manifest.json", "train", args, started,
                    inputs={"protocol": str(args.protocol),
                            "features_train": str(args.features_train),
                            "features_dev": str(args.features_dev)},
                    outputs={"checkpoint": str(prefix) + ".spk1",
                             "dev_min_dcf": ckpt.dev_min_dcf,
                             "dev_eer": ckpt.dev_eer,
                             "best_epoch": ckpt.epoch})
    print(f"best epoch {ckpt.epoch}: dev minDCF {ckpt.dev_min_dcf:.4f}, "
          f"dev EER {ckpt.dev_eer:.4f}")
    return 0


def _checkpoint_prefix(path: str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix == ".spk1" else p


def cmd_score(args) -> int:
    started = time.time()
    ckpt = load_checkpoint(_checkpoint_prefix(args.checkpoint))
    protocol = load_protocol(args.protocol)
    features = FeatureDir(args.features)
    records = protocol.for_partition(args.partition)

    attractor_source = None
    attractors = ckpt.attractors
    if args.enroll_protocol is not None:
        if ckpt.config.loss != "samo":
            raise UsageError(
                "--enroll-protocol requires a SAMO checkpoint, got "
                f"loss mode {ckpt.config.loss!r}")
        enroll = load_protocol(args.enroll_protocol)
        enroll_features = FeatureDir(args.enroll_features or args.features)
        by_spk: dict[str, list] = {}
        for rec in enroll:
            if rec.label != BONAFIDE:
                continue
            e, _ = embed(ckpt.mlp, ckpt.amff, enroll_features[rec.utt_id])
            by_spk.setdefault(rec.speaker_id, []).append(e)
        if not by_spk:
            raise ValueError("enrollment protocol has no bonafide records")
        attractors = samo_init_attractors(by_spk)
        attractor_source = "enrollment"
    elif ckpt.config.loss == "samo":
        attractor_source = "training"

    scores = score_records(ckpt.config.loss, ckpt.mlp, ckpt.amff, ckpt.oc,
                           ckpt.head, attractors, records, features)
    out = Path(args.out)
    write_scores(out, scores)
    _write_manifest(out.parent / (out.name + ".manifest.json"), "score", args,
                    started,
                    inputs={"checkpoint": str(args.checkpoint),
                            "protocol": str(args.protocol),
                            "features": str(args.features)},
                    outputs={"scores": str(out), "n_scores": len(scores),
                             "attractor_source": attractor_source})
    print(f"scored {len(scores)} {args.partition} utterances -> {out}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    scores = read_scores(args.scores)
    protocol = load_protocol(args.protocol)
    params = DcfParams(c_miss=args.dcf_cmiss, c_fa=args.dcf_cfa,
                       p_target=args.dcf_ptarget)
    try:
        values, labels = join_labels(scores, protocol)
    except KeyError as err:
        print(str(err), file=sys.stderr)
        return 1
    curve = det_curve(values, labels)
    eer_value, eer_thr = eer(curve)
    dcf_value, dcf_thr = min_dcf(curve, params)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "n_trials": int(values.size),
        "n_bonafide": int(np.sum(labels == 0)),
        "n_spoof": int(np.sum(labels == 1)),
        "eer": eer_value,
        "eer_threshold": eer_thr,
        "min_dcf": dcf_value,
        "min_dcf_threshold": dcf_thr,
        "dcf_params": {"c_miss": params.c_miss, "c_fa": params.c_fa,
                       "p_target": params.p_target},
    }
    write_summary_json(out_dir / "summary.json", summary)
    write_breakdown_csv(out_dir / "breakdown.csv",
                        breakdown(scores, protocol, params))
    edges, bona_counts, spoof_counts = histogram(values, labels, args.bins)
    write_histogram_csv(out_dir / "histogram.csv", edges, bona_counts,
                        spoof_counts)
    _write_manifest(out_dir / "manifest.json", "eval", args, started,
                    inputs={"scores": str(args.scores),
                            "protocol": str(args.protocol)},
                    outputs={"summary": str(out_dir / "summary.json"),
                             "breakdown": str(out_dir / "breakdown.csv"),
                             "histogram": str(out_dir / "histogram.csv")})
    print(f"eer {eer_value:.4f}  min_dcf {dcf_value:.4f}  -> {out_dir}")
    return 0


def _load_score_sets(paths, protocol, partitions):
    sets = [read_scores(p) for p in paths]
    if partitions:
        keep = set(partitions)
        filtered = []
        for s in sets:
            entries = [(u, v) for u, v in s.entries
                       if u in protocol and protocol.get(u).partition in keep]
            filtered.append(ScoreSet(entries))
        sets = filtered
    return sets


def cmd_fuse_train(args) -> int:
    started = time.time()
    protocol = load_protocol(args.protocol)
    sets = _load_score_sets(args.scores, protocol, args.partition)
    matrix = align_scores(sets, protocol)
    model = train_fusion(matrix, effective_prior=args.prior)
    out = Path(args.out)
    save_fusion(out, model)
    _write_manifest(out.parent / (out.name + ".manifest.json"), "fuse-train",
                    args, started,
                    inputs={"scores": [str(p) for p in args.scores],
                            "protocol": str(args.protocol)},
                    outputs={"model": str(out),
                             "weights": model.weights.tolist(),
                             "bias": model.bias})
    print(f"fusion weights {model.weights.tolist()} bias {model.bias:.6f}")
    return 0


def cmd_fuse_apply(args) -> int:
    started = time.time()
    protocol = load_protocol(args.protocol)
    model = load_fusion(args.model)
    sets = _load_score_sets(args.scores, protocol, args.partition)
    matrix = align_scores(sets, protocol)
    fused = apply_fusion(model, matrix.matrix)
    out = Path(args.out)
    write_scores(out, ScoreSet(list(zip(matrix.utt_ids, fused))))
    _write_manifest(out.parent / (out.name + ".manifest.json"), "fuse-apply",
                    args, started,
                    inputs={"model": str(args.model),
                            "scores": [str(p) for p in args.scores]},
                    outputs={"fused": str(out), "n_scores": len(matrix.utt_ids)})
    print(f"fused {len(matrix.utt_ids)} scores -> {out}")
    return 0


def _positive_int(minimum, name):
    def parse(text):
        value = int(text)
        if value < minimum:
            raise argparse.ArgumentTypeError(f"{name} must be >= {minimum}")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spoofcm",
        description="Anti-spoofing countermeasure pipeline at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--speakers", type=_positive_int(2, "--speakers"), required=True)
    p.add_argument("--utts", type=_positive_int(4, "--utts"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract LFCC features")
    p.add_argument("--protocol", required=True)
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("train", "infer"), required=True)
    p.add_argument("--seed", type=int, default=0,
                   help="crop seed for --mode train")
    p.add_argument("--partition", action="append", choices=PARTITIONS,
                   help="restrict to a partition (repeatable); default all")
    p.add_argument("--win-ms", type=float, default=20.0)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--n-fft", type=int, default=512)
    p.add_argument("--n-filters", type=int, default=40)
    p.add_argument("--n-ceps", type=int, default=40)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a countermeasure model")
    p.add_argument("--protocol", required=True)
    p.add_argument("--features-train", required=True,
                   help="directory of train-mode features for the train partition")
    p.add_argument("--features-dev", required=True,
                   help="directory of infer-mode features for the dev partition")
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=("softmax", "oc_softmax", "samo"),
                   required=True)
    p.add_argument("--samo-update-interval", type=_positive_int(1, "interval"),
                   default=None)
    p.add_argument("--samo-maxscore", action="store_true", default=False)
    p.add_argument("--samo-enroll", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="build dev scoring attractors from dev bonafide "
                        "embeddings (default: enabled for SAMO)")
    p.add_argument("--weighted", action="store_true",
                   help="class-weighted loss (0.9 bonafide / 0.1 spoof)")
    p.add_argument("--amff", action="store_true",
                   help="enable the multi-branch fusion gate in the embedder")
    p.add_argument("--epochs", type=_positive_int(1, "--epochs"), default=30)
    p.add_argument("--batch-size", type=_positive_int(2, "--batch-size"),
                   default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score utterances with a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint prefix or .spk1 path")
    p.add_argument("--protocol", required=True)
    p.add_argument("--features", required=True,
                   help="directory of infer-mode features")
    p.add_argument("--partition", choices=PARTITIONS, default="eval")
    p.add_argument("--out", required=True)
    p.add_argument("--enroll-protocol", default=None,
                   help="protocol of enrollment utterances (SAMO only)")
    p.add_argument("--enroll-features", default=None,
                   help="feature dir for enrollment utterances "
                        "(default: --features)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute EER/minDCF and reports")
    p.add_argument("--scores", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dcf-cmiss", type=float, default=1.0,
                   help="miss cost (toolkit default, not from any evaluation plan)")
    p.add_argument("--dcf-cfa", type=float, default=10.0)
    p.add_argument("--dcf-ptarget", type=float, default=0.05)
    p.add_argument("--bins", type=_positive_int(1, "--bins"), default=50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="train or apply score fusion")
    fuse_sub = p.add_subparsers(dest="fuse_command", required=True)
    pt = fuse_sub.add_parser("train")
    pt.add_argument("--scores", nargs="+", required=True)
    pt.add_argument("--protocol", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--prior", type=float, default=0.05)
    pt.add_argument("--partition", action="append", choices=PARTITIONS,
                    help="restrict training rows to a partition (repeatable)")
    pt.set_defaults(func=cmd_fuse_train)
    pa = fuse_sub.add_parser("apply")
    pa.add_argument("--model", required=True)
    pa.add_argument("--scores", nargs="+", required=True)
    pa.add_argument("--protocol", required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--partition", action="append", choices=PARTITIONS)
    pa.set_defaults(func=cmd_fuse_apply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
