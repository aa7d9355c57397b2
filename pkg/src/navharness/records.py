"""Episode records and their JSON-lines form."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .action_lang import Action
from .errors import SchemaError

RECORD_SCHEMA_VERSION = 1

TRACE_FIELDS = ("t", "x", "y", "yaw", "v", "omega", "v_cmd", "w_cmd", "contact")


class Termination(str, enum.Enum):
    STOP = "stop"
    MAX_DECISIONS = "max_decisions"
    COLLISION_TERMINATE = "collision_terminate"
    AGENT_ERROR = "agent_error"


@dataclass(eq=False)
class Trace:
    """Dense per-control-step samples.

    Sample 0 is the start state. Sample ``k >= 1`` holds the state after
    control step ``k`` together with the command applied during that step.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    yaw: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    v_cmd: np.ndarray
    w_cmd: np.ndarray
    contact: np.ndarray

    def __post_init__(self) -> None:
        for name in TRACE_FIELDS:
            dtype = bool if name == "contact" else float
            setattr(self, name, np.asarray(getattr(self, name), dtype=dtype).ravel())
        n = {len(getattr(self, name)) for name in TRACE_FIELDS}
        if len(n) != 1:
            raise SchemaError(f"trace columns have differing lengths {sorted(n)}")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def n_steps(self) -> int:
        return max(0, len(self) - 1)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).tolist() for name in TRACE_FIELDS}
        out["contact"] = [int(c) for c in self.contact]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> Trace:
        try:
            return cls(**{name: d[name] for name in TRACE_FIELDS})
        except KeyError as exc:
            raise SchemaError(f"trace missing column {exc.args[0]!r}") from None

    @classmethod
    def from_rows(cls, rows: Iterable[tuple]) -> Trace:
        cols = list(zip(*rows))
        if not cols:
            cols = [[] for _ in TRACE_FIELDS]
        return cls(*cols)


@dataclass
class Decision:
    raw_text: str
    action: Action | None
    command: dict | None
    start_pose: tuple[float, float, float]
    end_pose: tuple[float, float, float]
    collided: bool = False
    frame_ref: str = ""
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "action": None if self.action is None else self.action.to_dict(),
            "command": self.command,
            "start_pose": list(self.start_pose),
            "end_pose": list(self.end_pose),
            "collided": self.collided,
            "frame_ref": self.frame_ref,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Decision:
        action = d.get("action")
        return cls(
            raw_text=d["raw_text"],
            action=None if action is None else Action.from_dict(action),
            command=d.get("command"),
            start_pose=tuple(d["start_pose"]),
            end_pose=tuple(d["end_pose"]),
            collided=bool(d.get("collided", False)),
            frame_ref=d.get("frame_ref", ""),
            error=d.get("error"),
        )


@dataclass
class EpisodeRecord:
    scene_id: str
    instruction: str
    decisions: list[Decision]
    trajectory: Trace
    stop_issued: bool
    termination: Termination
    goal: tuple[float, float] = (0.0, 0.0)
    episode_index: int = 0
    seed: int = 0
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.termination = Termination(self.termination)
        if len(self.trajectory) == 0:
            raise SchemaError("trajectory must be non-empty")
        if self.stop_issued:
            last = self.decisions[-1].action if self.decisions else None
            if last is None or last.kind.value != "stop":
                raise SchemaError("stop_issued requires the last action to be stop")

    @property
    def actions(self) -> list[Action]:
        return [d.action for d in self.decisions if d.action is not None]

    @property
    def start_xy(self) -> tuple[float, float]:
        return float(self.trajectory.x[0]), float(self.trajectory.y[0])

    @property
    def final_xy(self) -> tuple[float, float]:
        return float(self.trajectory.x[-1]), float(self.trajectory.y[-1])

    def to_dict(self, include_timing: bool = False) -> dict:
        """Serializable form; wall time is left out unless asked for so output is reproducible."""
        out = {
            "schema_version": RECORD_SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "episode_index": self.episode_index,
            "seed": self.seed,
            "instruction": self.instruction,
            "goal": list(self.goal),
            "decisions": [d.to_dict() for d in self.decisions],
            "trajectory": self.trajectory.to_dict(),
            "stop_issued": self.stop_issued,
            "termination": self.termination.value,
            "meta": self.meta,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    @classmethod
    def from_dict(cls, d: dict) -> EpisodeRecord:
        if d.get("schema_version") != RECORD_SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {d.get('schema_version')!r}")
        try:
            return cls(
                scene_id=d["scene_id"],
                instruction=d["instruction"],
                decisions=[Decision.from_dict(x) for x in d["decisions"]],
                trajectory=Trace.from_dict(d["trajectory"]),
                stop_issued=bool(d["stop_issued"]),
                termination=Termination(d["termination"]),
                goal=tuple(d.get("goal", (0.0, 0.0))),
                episode_index=int(d.get("episode_index", 0)),
                seed=int(d.get("seed", 0)),
                wall_time=float(d.get("wall_time", 0.0)),
                meta=dict(d.get("meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"malformed episode record: {exc}") from None


def write_records(records: Iterable[EpisodeRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            n += 1
    return n


def iter_records(path: str | Path, errors: list | None = None) -> Iterator[EpisodeRecord]:
    """Yield records; malformed lines raise unless ``errors`` collects them."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield EpisodeRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, SchemaError) as exc:
                if errors is None:
                    raise SchemaError(f"{path}:{lineno}: {exc}") from None
                errors.append((lineno, str(exc)))


def read_records(path: str | Path) -> list[EpisodeRecord]:
    return list(iter_records(path))
