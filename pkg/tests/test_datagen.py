from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, strategies as st

from navharness.action_lang import Action, parse_action
from navharness.datagen import (
    CURRENT_CUE,
    HISTORY_CUE,
    DatagenConfig,
    RebalanceConfig,
    SftSample,
    build_nav_prompt,
    build_samples,
    build_summarization_prompt,
    class_fractions,
    emit_sft,
    episode_samples,
    merge_actions,
    merge_groups,
    read_sft,
    rebalance,
    rebalance_targets,
    sample_frames,
)
from navharness.records import Decision, EpisodeRecord, Termination, write_records
from conftest import make_record

F, TL, TR, S = Action.forward, Action.turn_left, Action.turn_right, Action.stop


@pytest.mark.parametrize(
    "t, k, expected",
    [(0, 8, [0]), (3, 8, [0, 1, 2, 3]), (8, 5, [0, 2, 5, 7, 8]), (7, 8, list(range(8)))],
)
def test_sample_frames_examples(t, k, expected):
    assert sample_frames(t, k) == expected


@given(st.integers(0, 500), st.integers(2, 64))
def test_sample_frames_properties(t, k):
    out = sample_frames(t, k)
    assert out == sorted(set(out))
    assert out[-1] == t and len(out) <= k
    if t >= 1:
        assert out[0] == 0


def test_sample_frames_errors():
    with pytest.raises(ValueError):
        sample_frames(-1, 8)
    with pytest.raises(ValueError):
        sample_frames(3, 1)


def test_nav_prompt():
    p = build_nav_prompt("go to the chair", 2)
    h, c = p.index(HISTORY_CUE), p.index(CURRENT_CUE)
    assert h < c < p.index("go to the chair")
    assert p[h:c].count("<frame") == 2 and p[c:].count("<frame") == 1
    assert p == build_nav_prompt("go to the chair", 2)
    assert "<frame0><frame1>" in p and "<frame2>" in p[c:]


def test_nav_prompt_no_history():
    p = build_nav_prompt("go", 0)
    assert HISTORY_CUE in p
    assert p[: p.index(CURRENT_CUE)].count("<frame") == 0
    assert f"{HISTORY_CUE}\n" in p


def test_nav_prompt_errors():
    with pytest.raises(ValueError):
        build_nav_prompt("  ", 1)
    with pytest.raises(ValueError):
        build_nav_prompt("go", 2, [0, 1])


def test_summary_prompt():
    p = build_summarization_prompt(3, [3, 6, 9])
    assert "<frame3><frame6><frame9>" in p
    assert p.startswith("Assume you are a robot designed for navigation.")
    assert p.endswith("please describe the navigation trajectory of the robot.")
    assert build_summarization_prompt(1).count("<frame") == 1
    assert build_summarization_prompt(2) == build_summarization_prompt(2)
    with pytest.raises(ValueError):
        build_summarization_prompt(0)


def test_merge_examples():
    assert merge_actions([F(0.25), F(0.25)]) == [F(0.5)]
    assert merge_actions([F(0.25)] * 4) == [F(0.75), F(0.25)]
    assert merge_actions([TL(15), TR(15)]) == [TL(15), TR(15)]
    assert merge_actions([S(), S()]) == [S(), S()]
    assert merge_actions([TL(15)] * 7, max_merge=3) == [TL(45), TL(45), TL(15)]


actions = st.lists(
    st.one_of(
        st.integers(1, 20).map(lambda k: F(k * 0.05)),
        st.integers(1, 6).map(lambda k: TL(k * 15.0)),
        st.integers(1, 6).map(lambda k: TR(k * 15.0)),
        st.just(S()),
    ),
    max_size=30,
)


@given(actions, st.integers(1, 5))
def test_merge_properties(seq, m):
    groups = merge_groups(seq, m)
    covered = [i for _, idx in groups for i in idx]
    assert covered == list(range(len(seq)))
    for merged, idx in groups:
        assert len(idx) <= m
        assert all(seq[i].kind is merged.kind for i in idx)
        assert merged.magnitude == math.fsum(seq[i].magnitude for i in idx)
        if merged.kind.value == "stop":
            assert len(idx) == 1


def _sample(kind_text, i=0):
    return SftSample("p", ["f"], kind_text, {"scene_id": "s", "episode_index": 0, "step_index": i, "task": "nav"})


def test_rebalance_balanced_unchanged():
    samples = [_sample(t, i) for i, t in enumerate(["stop", "move forward 25 cm", "turn left 15 degrees", "turn right 15 degrees"])]
    assert rebalance(samples) == samples


def test_rebalance_cap_binds():
    samples = [_sample("move forward 25 cm", i) for i in range(99)] + [_sample("stop", 99)]
    out = rebalance(samples, RebalanceConfig(min_class_frac=0.05, max_dup_factor=5))
    assert out[:100] == samples
    assert sum(s.label == "stop" for s in out) == 5
    assert all(s.meta.get("duplicate") for s in out[100:])


def test_rebalance_targets_fixed_point():
    assert rebalance_targets({"forward": 99, "stop": 1}, 0.05, 5) == {"forward": 99, "stop": 5}
    assert rebalance_targets({"forward": 90, "stop": 10}, 0.08, 5) == {"forward": 90, "stop": 10}
    t = rebalance_targets({"forward": 90, "stop": 5}, 0.08, 5)
    assert t["stop"] == math.ceil(0.08 * sum(t.values()))


def test_rebalance_no_synthesis():
    samples = [_sample("move forward 25 cm", i) for i in range(20)]
    out = rebalance(samples)
    assert out == samples
    assert "stop" not in class_fractions(out)


@given(st.lists(st.sampled_from(["stop", "move forward 25 cm", "turn left 15 degrees", "turn right 30 degrees"]),
                min_size=1, max_size=80), st.floats(0.01, 0.3), st.integers(1, 6), st.integers(0, 3))
def test_rebalance_bound(labels, frac, cap, seed):
    samples = [_sample(t, i) for i, t in enumerate(labels)]
    out = rebalance(samples, RebalanceConfig(frac, cap, seed))
    assert out[: len(samples)] == samples
    assert out == rebalance(samples, RebalanceConfig(frac, cap, seed))
    fr = class_fractions(out)
    total = len(out)
    orig = {}
    for s in samples:
        k = parse_action(s.label).action.kind.value
        orig[k] = orig.get(k, 0) + 1
    for k, n in orig.items():
        got = round(fr[k] * total)
        assert got >= n
        assert fr[k] >= frac - 1e-9 or got == cap * n


def _episode(actions, idx=0, scene="sc"):
    decisions = [Decision(str(a), a, None, (0, 0, 0), (0, 0, 0)) for a in actions]
    base = make_record([(0.0, 0.0)], False)
    return EpisodeRecord(scene, "walk to the door", decisions, base.trajectory,
                         actions[-1].kind.value == "stop", Termination.STOP, episode_index=idx)


def test_episode_samples_count():
    rec = _episode([TL(15), F(0.25), TR(15), S()])
    samples = episode_samples(rec)
    nav = [s for s in samples if s.task == "nav"]
    summ = [s for s in samples if s.task == "summarize"]
    assert len(nav) == 4 and len(summ) == 1
    assert summ[0].label == "walk to the door"
    for s in nav:
        parse_action(s.label)
        assert s.frame_refs and s.frame_refs[-1].endswith(f"frame{s.meta['step_index']:04d}")


def test_episode_samples_merge():
    rec = _episode([F(0.25)] * 4 + [S()])
    nav = [s for s in episode_samples(rec) if s.task == "nav"]
    assert [s.label for s in nav] == ["move forward 75 cm", "move forward 25 cm", "stop"]
    assert [s.meta["step_index"] for s in nav] == [0, 3, 4]


def test_emit_sft_deterministic(tmp_path, caplog):
    recs = [_episode([F(0.25), F(0.25), TL(15), S()], i, f"s{i % 2}") for i in range(4)]
    write_records(recs, tmp_path / "e.jsonl")
    with open(tmp_path / "e.jsonl", "a") as fh:
        fh.write("{broken\n")
    a = emit_sft(tmp_path / "e.jsonl", tmp_path / "a.jsonl", DatagenConfig(seed=3))
    b = emit_sft(tmp_path / "e.jsonl", tmp_path / "b.jsonl", DatagenConfig(seed=3))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert a == b and a["episodes"] == 4 and a["skipped_lines"] == 1
    assert "skipping malformed" in caplog.text
    rows = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert all(set(r) == {"schema_version", "task", "prompt", "frame_refs", "label", "meta"} for r in rows)
    back = read_sft(tmp_path / "a.jsonl")
    assert [s.to_dict() for s in back] == rows
    keys = [(s.meta["scene_id"], s.meta["episode_index"]) for s in back if not s.meta.get("duplicate")]
    assert keys == sorted(keys)


def test_build_samples_without_rebalance():
    recs = [_episode([F(0.25), S()])]
    assert len(build_samples(recs, DatagenConfig(rebalance=False))) == 3
