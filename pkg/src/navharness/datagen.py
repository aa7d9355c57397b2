"""Supervised fine-tuning samples from recorded episodes."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .action_lang import Action, ActionKind, format_action, parse_action
from .records import EpisodeRecord, iter_records

log = logging.getLogger(__name__)

SFT_SCHEMA_VERSION = 1
HISTORY_CUE = "a video of historical observations:"
CURRENT_CUE = "current observation:"

_SUMMARY_HEAD = (
    "Assume you are a robot designed for navigation. You are provided with captured image sequences:"
)
_SUMMARY_TAIL = "Based on this image sequence, please describe the navigation trajectory of the robot."


def placeholder(i: int) -> str:
    return f"<frame{i}>"


def sample_frames(t: int, budget: int) -> list[int]:
    """History frame indices followed by the current index ``t``.

    When the history is longer than ``budget - 1`` it is subsampled with
    ``round(linspace(0, t - 1, budget - 1))``, which always keeps frame 0.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if budget < 2:
        raise ValueError("budget must be at least 2")
    if t <= budget - 1:
        history = list(range(t))
    else:
        history = sorted(set(np.round(np.linspace(0, t - 1, budget - 1)).astype(int).tolist()))
    return history + [t]


def build_nav_prompt(instruction: str, n_history: int, frame_ids: Sequence[int] | None = None) -> str:
    if not instruction or not instruction.strip():
        raise ValueError("instruction must be non-empty")
    if frame_ids is None:
        frame_ids = range(n_history + 1)
    ids = list(frame_ids)
    if len(ids) != n_history + 1:
        raise ValueError(f"expected {n_history + 1} frame ids, got {len(ids)}")
    history = "".join(placeholder(i) for i in ids[:-1])
    return (
        f"You are a legged robot following a route description. "
        f"This is {HISTORY_CUE}{' ' + history if history else ''}\n"
        f"This is the {CURRENT_CUE} {placeholder(ids[-1])}\n"
        f"Route description: {instruction.strip()}\n"
        "What should you do next? Answer with exactly one of: "
        "move forward <n> cm, turn left <n> degrees, turn right <n> degrees, stop."
    )


def build_summarization_prompt(n_frames: int, frame_ids: Sequence[int] | None = None) -> str:
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    ids = list(range(n_frames)) if frame_ids is None else list(frame_ids)
    if len(ids) != n_frames:
        raise ValueError(f"expected {n_frames} frame ids, got {len(ids)}")
    frames = "".join(placeholder(i) for i in ids)
    return f"{_SUMMARY_HEAD}\n\n{frames}\n\n{_SUMMARY_TAIL}"


def merge_actions(seq: Sequence[Action], max_merge: int = 3) -> list[Action]:
    """Greedily fuse runs of same-kind moves, at most ``max_merge`` originals each."""
    return [merged for merged, _ in merge_groups(seq, max_merge)]


def merge_groups(seq: Sequence[Action], max_merge: int = 3) -> list[tuple[Action, list[int]]]:
    """Merged actions with the indices of the originals each one covers."""
    if max_merge < 1:
        raise ValueError("max_merge must be at least 1")
    out: list[tuple[Action, list[int]]] = []
    i = 0
    while i < len(seq):
        a = seq[i]
        idx = [i]
        if a.kind is not ActionKind.STOP:
            while (
                len(idx) < max_merge
                and i + len(idx) < len(seq)
                and seq[i + len(idx)].kind is a.kind
            ):
                idx.append(i + len(idx))
        total = math.fsum(seq[k].magnitude for k in idx)
        out.append((Action(a.kind, total) if len(idx) > 1 else a, idx))
        i += len(idx)
    return out


@dataclass
class SftSample:
    prompt: str
    frame_refs: list[str]
    label: str
    meta: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.meta.get("task", "nav")

    def to_dict(self) -> dict:
        return {
            "schema_version": SFT_SCHEMA_VERSION,
            "task": self.task,
            "prompt": self.prompt,
            "frame_refs": list(self.frame_refs),
            "label": self.label,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SftSample:
        meta = dict(d.get("meta", {}))
        meta.setdefault("task", d.get("task", "nav"))
        return cls(d["prompt"], list(d["frame_refs"]), d["label"], meta)


def label_kind(sample: SftSample) -> str | None:
    """Action kind of a nav sample's label; ``None`` for non-nav samples."""
    if sample.task != "nav":
        return None
    return parse_action(sample.label).action.kind.value


@dataclass(frozen=True)
class RebalanceConfig:
    min_class_frac: float = 0.08
    max_dup_factor: int = 5
    seed: int = 0


def rebalance_targets(counts: dict[str, int], min_frac: float, max_dup: int) -> dict[str, int]:
    """Smallest per-class counts reaching ``min_frac`` of the new total, capped at ``max_dup`` x."""
    target = dict(counts)
    while True:
        total = sum(target.values())
        need = {
            k: min(max(target[k], math.ceil(min_frac * total - 1e-9)), max_dup * counts[k])
            for k in counts
        }
        if need == target:
            return target
        target = need


def rebalance(samples: Sequence[SftSample], cfg: RebalanceConfig = RebalanceConfig()) -> list[SftSample]:
    """Oversample rare nav action kinds; originals are kept in order, duplicates appended."""
    out = list(samples)
    groups: dict[str, list[int]] = {}
    for k, s in enumerate(samples):
        kind = label_kind(s)
        if kind is not None:
            groups.setdefault(kind, []).append(k)
    if not groups:
        return out
    counts = {kind: len(ix) for kind, ix in groups.items()}
    targets = rebalance_targets(counts, cfg.min_class_frac, cfg.max_dup_factor)
    rng = np.random.default_rng(cfg.seed)
    for kind in sorted(groups):
        extra = targets[kind] - counts[kind]
        if extra <= 0:
            continue
        order = rng.permutation(groups[kind])
        for r in range(extra):
            src = samples[int(order[r % len(order)])]
            out.append(SftSample(src.prompt, list(src.frame_refs), src.label, dict(src.meta, duplicate=True)))
    return out


def class_fractions(samples: Iterable[SftSample]) -> dict[str, float]:
    kinds = Counter(k for k in map(label_kind, samples) if k is not None)
    total = sum(kinds.values())
    return {k: v / total for k, v in sorted(kinds.items())} if total else {}


@dataclass(frozen=True)
class DatagenConfig:
    frames_budget: int = 8
    max_merge: int = 3
    rebalance: bool = True
    min_class_frac: float = 0.08
    max_dup_factor: int = 5
    seed: int = 0
    summarize: bool = True


def episode_samples(rec: EpisodeRecord, cfg: DatagenConfig = DatagenConfig()) -> list[SftSample]:
    """One nav sample per merged action plus one trajectory-summary sample."""
    decisions = [d for d in rec.decisions if d.action is not None]
    frames = [d.frame_ref or f"{rec.scene_id}/ep{rec.episode_index:05d}/frame{k:04d}" for k, d in enumerate(decisions)]
    out = []
    for merged, idx in merge_groups([d.action for d in decisions], cfg.max_merge):
        t = idx[0]
        ids = sample_frames(t, cfg.frames_budget)
        out.append(
            SftSample(
                prompt=build_nav_prompt(rec.instruction, len(ids) - 1, ids),
                frame_refs=[frames[i] for i in ids],
                label=format_action(merged),
                meta={"scene_id": rec.scene_id, "episode_index": rec.episode_index, "step_index": t, "task": "nav"},
            )
        )
    if cfg.summarize and frames:
        ids = sample_frames(len(frames) - 1, cfg.frames_budget)
        out.append(
            SftSample(
                prompt=build_summarization_prompt(len(ids), ids),
                frame_refs=[frames[i] for i in ids],
                label=rec.instruction,
                meta={
                    "scene_id": rec.scene_id,
                    "episode_index": rec.episode_index,
                    "step_index": len(frames),
                    "task": "summarize",
                },
            )
        )
    return out


def build_samples(records: Iterable[EpisodeRecord], cfg: DatagenConfig = DatagenConfig()) -> list[SftSample]:
    samples = [s for rec in records for s in episode_samples(rec, cfg)]
    samples.sort(key=lambda s: (s.meta["scene_id"], s.meta["episode_index"], s.meta["step_index"], s.task))
    if cfg.rebalance:
        samples = rebalance(samples, RebalanceConfig(cfg.min_class_frac, cfg.max_dup_factor, cfg.seed))
    return samples


def emit_sft(episodes: str | Path, out: str | Path, cfg: DatagenConfig = DatagenConfig()) -> dict:
    """Write SFT JSONL; malformed episode lines are skipped and counted."""
    errors: list = []
    records = list(iter_records(episodes, errors=errors))
    for lineno, msg in errors:
        log.warning("skipping malformed episode line %d: %s", lineno, msg)
    samples = build_samples(records, cfg)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    return {
        "episodes": len(records),
        "skipped_lines": len(errors),
        "samples": len(samples),
        "class_fractions": class_fractions(samples),
    }


def read_sft(path: str | Path) -> list[SftSample]:
    with open(path, encoding="utf-8") as fh:
        return [SftSample.from_dict(json.loads(line)) for line in fh if line.strip()]
