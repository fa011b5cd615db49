"""Detection metrics: DET sweep, EER, normalized minDCF, breakdown reports.

Decision rule: accept as bonafide iff score >= threshold. Pmiss is the
fraction of bonafide trials below the threshold, Pfa the fraction of spoof
trials at or above it. The curve is evaluated at every distinct score plus
-inf/+inf sentinels, so it always contains the (0, 1) and (1, 0) endpoints.
EER interpolates linearly between adjacent operating points; minDCF is the
exact minimum over operating points. The DCF defaults (c_miss=1, c_fa=10,
p_target=0.05) are configuration, not constants.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .protocol import ProtocolTable, label_to_int


@dataclass(frozen=True)
class DcfParams:
    c_miss: float = 1.0
    c_fa: float = 10.0
    p_target: float = 0.05

    def __post_init__(self) -> None:
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must be in (0, 1)")


class ScoreSet:
    """Per-utterance detection scores with unique ids and finite values."""

    def __init__(self, entries):
        self.entries: tuple[tuple[str, float], ...] = tuple(
            (str(u), float(s)) for u, s in entries)
        ids = [u for u, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utt_id in score set")
        values = np.array([s for _, s in self.entries], dtype=np.float64)
        if values.size and not np.all(np.isfinite(values)):
            raise ValueError("scores must be finite")
        self.ids: tuple[str, ...] = tuple(ids)
        self.values: np.ndarray = values
        self._pos = {u: i for i, u in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._pos

    def score_of(self, utt_id: str) -> float:
        return self.entries[self._pos[utt_id]][1]


def write_scores(path, scores: ScoreSet) -> None:
    """Score file: one "utt_id<TAB>score" line, full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, score in scores.entries:
            fh.write(f"{utt_id}\t{score!r}\n")


def read_scores(path) -> ScoreSet:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {line_no}: expected 'utt_id score'")
            entries.append((parts[0], float(parts[1])))
    return ScoreSet(entries)


@dataclass
class DetCurve:
    thresholds: np.ndarray
    pmiss: np.ndarray
    pfa: np.ndarray


def det_curve(scores: np.ndarray, labels: np.ndarray) -> DetCurve:
    """Operating points at all distinct scores plus sentinels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    bona = np.sort(scores[labels == 0])
    spoof = np.sort(scores[labels == 1])
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("need at least one bonafide and one spoof trial")
    thresholds = np.concatenate(([-np.inf], np.unique(scores), [np.inf]))
    pmiss = np.searchsorted(bona, thresholds, side="left") / bona.size
    pfa = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    return DetCurve(thresholds=thresholds, pmiss=pmiss, pfa=pfa)


def eer(curve: DetCurve) -> tuple[float, float]:
    """Equal error rate with linear interpolation between operating points.

    Returns (eer, threshold). The interpolated threshold falls back to the
    nearer finite endpoint when the crossing involves a sentinel.
    """
    diff = curve.pmiss - curve.pfa
    idx = int(np.flatnonzero(diff >= 0)[0])
    if diff[idx] == 0.0:
        return float(curve.pmiss[idx]), float(curve.thresholds[idx])
    a, b = idx - 1, idx
    t = -diff[a] / (diff[b] - diff[a])
    value = curve.pmiss[a] + t * (curve.pmiss[b] - curve.pmiss[a])
    ta, tb = curve.thresholds[a], curve.thresholds[b]
    if not np.isfinite(ta):
        thr = float(tb)
    elif not np.isfinite(tb):
        thr = float(ta)
    else:
        thr = float(ta + t * (tb - ta))
    return float(value), thr


def min_dcf(curve: DetCurve, params: DcfParams) -> tuple[float, float]:
    """Minimum normalized detection cost over the curve's operating points."""
    dcf = (params.c_miss * params.p_target * curve.pmiss
           + params.c_fa * (1.0 - params.p_target) * curve.pfa)
    norm = min(params.c_miss * params.p_target,
               params.c_fa * (1.0 - params.p_target))
    idx = int(np.argmin(dcf))
    return float(dcf[idx] / norm), float(curve.thresholds[idx])


def join_labels(scores: ScoreSet, protocol: ProtocolTable):
    """Score/label arrays for every scored utterance, in score-set order.

    Raises KeyError listing any utt_id missing from the protocol.
    """
    missing = [u for u in scores.ids if u not in protocol]
    if missing:
        raise KeyError(f"utt_ids not in protocol: {', '.join(sorted(missing))}")
    labels = np.array([label_to_int(protocol.get(u).label) for u in scores.ids])
    return scores.values.copy(), labels


@dataclass
class BreakdownCell:
    axis: str            # "pooled" | "attack" | "codec"
    condition: str
    n_bonafide: int
    n_spoof: int
    eer: float | None    # None when the cell lacks a class
    min_dcf: float | None


def _cell_metrics(scores: np.ndarray, labels: np.ndarray, axis: str,
                  condition: str, params: DcfParams) -> BreakdownCell:
    n_bona = int(np.sum(labels == 0))
    n_spoof = int(np.sum(labels == 1))
    if n_bona == 0 or n_spoof == 0:
        return BreakdownCell(axis, condition, n_bona, n_spoof, None, None)
    curve = det_curve(scores, labels)
    return BreakdownCell(axis, condition, n_bona, n_spoof,
                         eer(curve)[0], min_dcf(curve, params)[0])


def breakdown(scores: ScoreSet, protocol: ProtocolTable,
              params: DcfParams) -> list[BreakdownCell]:
    """Pooled metrics plus per-attack and per-codec cells.

    An attack cell pools all bonafide trials against that attack's spoof
    trials; a codec cell compares bonafide and spoof trials sharing the
    codec ("-" codecs are the no-codec sentinel and get no cell).
    """
    values, labels = join_labels(scores, protocol)
    records = [protocol.get(u) for u in scores.ids]
    cells = [_cell_metrics(values, labels, "pooled", "all", params)]

    attacks = sorted({r.attack_id for r in records if label_to_int(r.label) == 1})
    for attack in attacks:
        mask = np.array([label_to_int(r.label) == 0 or r.attack_id == attack
                         for r in records])
        cells.append(_cell_metrics(values[mask], labels[mask], "attack",
                                   attack, params))
    codecs = sorted({r.codec_id for r in records if r.codec_id != "-"})
    for codec in codecs:
        mask = np.array([r.codec_id == codec for r in records])
        cells.append(_cell_metrics(values[mask], labels[mask], "codec",
                                   codec, params))
    return cells


def histogram(scores: np.ndarray, labels: np.ndarray, n_bins: int):
    """Shared equal-width bins over [min, max]; per-class counts.

    Returns (edges, bonafide_counts, spoof_counts). All-equal scores
    collapse to a single degenerate bin holding everything.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        edges = np.array([lo, hi])
        return (edges, np.array([int(np.sum(labels == 0))]),
                np.array([int(np.sum(labels == 1))]))
    edges = np.linspace(lo, hi, n_bins + 1)
    bona_counts, _ = np.histogram(scores[labels == 0], bins=edges)
    spoof_counts, _ = np.histogram(scores[labels == 1], bins=edges)
    return edges, bona_counts, spoof_counts


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_breakdown_csv(path, cells: list[BreakdownCell]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "condition", "n_bonafide", "n_spoof",
                         "eer", "min_dcf"])
        for c in cells:
            writer.writerow([
                c.axis, c.condition, c.n_bonafide, c.n_spoof,
                "" if c.eer is None else repr(c.eer),
                "" if c.min_dcf is None else repr(c.min_dcf)])


def write_histogram_csv(path, edges: np.ndarray, bona_counts: np.ndarray,
                        spoof_counts: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "bonafide_count", "spoof_count"])
        for i in range(len(bona_counts)):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                             int(bona_counts[i]), int(spoof_counts[i])])
