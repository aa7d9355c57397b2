from __future__ import annotations

import json

import pytest

from navharness.action_lang import Action
from navharness.errors import SchemaError
from navharness.records import Decision, EpisodeRecord, Termination, Trace, iter_records, read_records, write_records
from conftest import make_record


def test_round_trip(tmp_path):
    rec = make_record([(1.0, 1.0), (1.5, 1.0)], True, (2.0, 1.0))
    write_records([rec, rec], tmp_path / "e.jsonl")
    back = read_records(tmp_path / "e.jsonl")
    assert [r.to_dict() for r in back] == [rec.to_dict()] * 2


def test_wall_time_excluded_by_default():
    rec = make_record([(1.0, 1.0)], True)
    rec.wall_time = 3.2
    assert "wall_time" not in rec.to_dict()
    assert rec.to_dict(include_timing=True)["wall_time"] == 3.2


def test_invariants():
    with pytest.raises(SchemaError):
        EpisodeRecord("s", "i", [], Trace.from_rows([]), False, Termination.MAX_DECISIONS)
    trace = make_record([(0.0, 0.0)], False).trajectory
    with pytest.raises(SchemaError):
        EpisodeRecord("s", "i", [Decision("turn left 15 degrees", Action.turn_left(15), None, (0, 0, 0), (0, 0, 0))],
                      trace, True, Termination.STOP)


def test_trace_columns_must_match():
    with pytest.raises(SchemaError):
        Trace(t=[0, 1], x=[0], y=[0], yaw=[0], v=[0], omega=[0], v_cmd=[0], w_cmd=[0], contact=[0])


def test_malformed_lines(tmp_path):
    rec = make_record([(1.0, 1.0)], True)
    p = tmp_path / "e.jsonl"
    p.write_text(json.dumps(rec.to_dict()) + "\n{not json\n" + json.dumps({"schema_version": 9}) + "\n\n")
    with pytest.raises(SchemaError):
        read_records(p)
    errors: list = []
    good = list(iter_records(p, errors=errors))
    assert len(good) == 1 and [e[0] for e in errors] == [2, 3]


def test_missing_field(tmp_path):
    d = make_record([(1.0, 1.0)], True).to_dict()
    del d["trajectory"]["x"]
    with pytest.raises(SchemaError):
        EpisodeRecord.from_dict(d)
