"""Protocol metadata: utterance records and the protocol table.

A protocol file is UTF-8 text with one record per line and six columns:

    utt_id speaker_id attack_id codec_id label partition

Columns may be separated by spaces or tabs on input; serialization emits
single spaces. ``-`` marks a not-applicable attack or codec.
"""

from __future__ import annotations

from dataclasses import dataclass

BONAFIDE = "bonafide"
SPOOF = "spoof"
LABELS = (BONAFIDE, SPOOF)
PARTITIONS = ("train", "dev", "eval")
NOT_APPLICABLE = "-"

_N_COLUMNS = 6


class ProtocolParseError(ValueError):
    """Malformed protocol line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateUtteranceError(ProtocolParseError):
    """Same utt_id appears more than once."""

    def __init__(self, line_no: int, utt_id: str) -> None:
        super().__init__(line_no, f"duplicate utt_id {utt_id!r}")
        self.utt_id = utt_id


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    attack_id: str
    codec_id: str
    label: str
    partition: str

    def to_line(self) -> str:
        return " ".join(
            (self.utt_id, self.speaker_id, self.attack_id,
             self.codec_id, self.label, self.partition)
        )


class ProtocolTable:
    """Ordered utterance records with a unique utt_id index."""

    def __init__(self, records: list[UtteranceRecord] | tuple[UtteranceRecord, ...]):
        self.records: tuple[UtteranceRecord, ...] = tuple(records)
        self.index: dict[str, int] = {}
        for pos, rec in enumerate(self.records):
            if rec.utt_id in self.index:
                raise ValueError(f"duplicate utt_id {rec.utt_id!r} at position {pos}")
            self.index[rec.utt_id] = pos

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ProtocolTable) and self.records == other.records

    def get(self, utt_id: str) -> UtteranceRecord:
        return self.records[self.index[utt_id]]

    def for_partition(self, partition: str) -> list[UtteranceRecord]:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        return [r for r in self.records if r.partition == partition]

    def speakers(self, partition: str | None = None) -> list[str]:
        """Distinct speaker ids (sorted), optionally limited to a partition."""
        recs = self.records if partition is None else self.for_partition(partition)
        return sorted({r.speaker_id for r in recs})

    def serialize(self) -> str:
        return "".join(rec.to_line() + "\n" for rec in self.records)


def _parse_line(line_no: int, line: str, seen: dict[str, int]) -> UtteranceRecord:
    cols = line.split()
    if len(cols) != _N_COLUMNS:
        raise ProtocolParseError(
            line_no, f"expected {_N_COLUMNS} columns, got {len(cols)}")
    utt_id, speaker_id, attack_id, codec_id, label, partition = cols
    if utt_id in seen:
        raise DuplicateUtteranceError(line_no, utt_id)
    if label not in LABELS:
        raise ProtocolParseError(line_no, f"unknown label {label!r}")
    if partition not in PARTITIONS:
        raise ProtocolParseError(line_no, f"unknown partition {partition!r}")
    if label == BONAFIDE and attack_id != NOT_APPLICABLE:
        raise ProtocolParseError(
            line_no, f"bonafide record with attack_id {attack_id!r}")
    seen[utt_id] = line_no
    return UtteranceRecord(utt_id, speaker_id, attack_id, codec_id, label, partition)


def parse_protocol(text: str) -> ProtocolTable:
    """Parse protocol text; raises ProtocolParseError with the offending line."""
    records = []
    seen: dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        records.append(_parse_line(line_no, line, seen))
    return ProtocolTable(records)


def load_protocol(path) -> ProtocolTable:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_protocol(fh.read())


def save_protocol(path, table: ProtocolTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(table.serialize())


def label_to_int(label: str) -> int:
    """0 for bonafide, 1 for spoof (the convention used by all losses/metrics)."""
    if label == BONAFIDE:
        return 0
    if label == SPOOF:
        return 1
    raise ValueError(f"unknown label {label!r}")
