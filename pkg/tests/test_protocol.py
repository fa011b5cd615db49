from __future__ import annotations

import pytest

from spoofcm.protocol import (BONAFIDE, SPOOF, DuplicateUtteranceError,
                              ProtocolParseError, ProtocolTable,
                              UtteranceRecord, label_to_int, parse_protocol)


def test_single_well_formed_line():
    table = parse_protocol("u1 s1 - - bonafide train")
    assert len(table) == 1
    rec = table.get("u1")
    assert rec == UtteranceRecord("u1", "s1", "-", "-", "bonafide", "train")


def test_duplicate_utt_id_reports_line():
    text = "u1 s1 - - bonafide train\nu1 s2 A17 - spoof train"
    with pytest.raises(DuplicateUtteranceError) as err:
        parse_protocol(text)
    assert err.value.line_no == 2
    assert "u1" in str(err.value)


def test_wrong_column_count_reports_line():
    with pytest.raises(ProtocolParseError) as err:
        parse_protocol("u1 s1 A17 bonafide train")
    assert err.value.line_no == 1


def test_bonafide_with_attack_rejected():
    with pytest.raises(ProtocolParseError):
        parse_protocol("u1 s1 A17 - bonafide train")


def test_unknown_label_and_partition_rejected():
    with pytest.raises(ProtocolParseError):
        parse_protocol("u1 s1 - - genuine train")
    with pytest.raises(ProtocolParseError):
        parse_protocol("u1 s1 - - bonafide test")


def test_tab_separated_accepted():
    table = parse_protocol("u1\ts1\t-\t-\tbonafide\tdev")
    assert table.get("u1").partition == "dev"


def test_blank_lines_skipped():
    table = parse_protocol("\nu1 s1 - - bonafide train\n\n")
    assert len(table) == 1


def test_round_trip():
    records = [
        UtteranceRecord("u1", "s1", "-", "-", BONAFIDE, "train"),
        UtteranceRecord("u2", "s1", "A17", "c3", SPOOF, "train"),
        UtteranceRecord("u3", "s2", "-", "c1", BONAFIDE, "dev"),
        UtteranceRecord("u4", "s3", "T02", "-", SPOOF, "eval"),
    ]
    table = ProtocolTable(records)
    assert parse_protocol(table.serialize()) == table


def test_index_is_bijection():
    table = parse_protocol("u1 s1 - - bonafide train\nu2 s1 A1 - spoof dev")
    assert sorted(table.index.values()) == list(range(len(table)))
    for utt_id, pos in table.index.items():
        assert table.records[pos].utt_id == utt_id


def test_partition_and_speaker_helpers():
    table = parse_protocol(
        "u1 s2 - - bonafide train\n"
        "u2 s1 A1 - spoof train\n"
        "u3 s3 - - bonafide dev\n")
    assert [r.utt_id for r in table.for_partition("train")] == ["u1", "u2"]
    assert table.speakers() == ["s1", "s2", "s3"]
    assert table.speakers("train") == ["s1", "s2"]
    with pytest.raises(ValueError):
        table.for_partition("progress")


def test_label_to_int():
    assert label_to_int(BONAFIDE) == 0
    assert label_to_int(SPOOF) == 1
    with pytest.raises(ValueError):
        label_to_int("other")
