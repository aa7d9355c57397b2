from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from navharness.scene import Pose, Scene, load_scene, room

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def corridor_path() -> Path:
    return FIXTURES / "corridor.json"


@pytest.fixture
def corridor() -> Scene:
    return load_scene(FIXTURES / "corridor.json")


def open_room(cells: tuple[int, int] = (40, 40), start=(1.0, 1.0, 0.0), goal=(3.0, 1.0), cs: float = 0.1) -> Scene:
    """Walled empty room; ``cells`` is (rows, cols)."""
    occ = room(cells)
    return Scene("room", cs, occ, np.zeros(occ.shape), Pose(*start), goal, [start[:2], goal], "go to the goal")


@pytest.fixture
def empty_room() -> Scene:
    return open_room()


def make_record(xy, stop: bool = True, goal=(0.0, 0.0), v=None, v_cmd=None, contact=None, scene_id: str = "room"):
    """EpisodeRecord whose trajectory visits ``xy``; other trace columns default to zero."""
    from navharness.action_lang import Action
    from navharness.records import Decision, EpisodeRecord, Termination, Trace

    n = len(xy)
    zeros = [0.0] * n
    trace = Trace(
        t=[0.02 * k for k in range(n)],
        x=[p[0] for p in xy],
        y=[p[1] for p in xy],
        yaw=zeros,
        v=zeros if v is None else v,
        omega=zeros,
        v_cmd=zeros if v_cmd is None else v_cmd,
        w_cmd=zeros,
        contact=[False] * n if contact is None else contact,
    )
    end = tuple(xy[-1]) + (0.0,)
    decisions = [Decision("stop", Action.stop(), None, end, end)] if stop else []
    return EpisodeRecord(
        scene_id=scene_id,
        instruction="go",
        decisions=decisions,
        trajectory=trace,
        stop_issued=stop,
        termination=Termination.STOP if stop else Termination.MAX_DECISIONS,
        goal=tuple(goal),
    )


def metric_fixtures():
    import json

    scene = load_scene(FIXTURES / "metric_room.json")
    episodes = json.loads((FIXTURES / "metric_episodes.json").read_text())
    return scene, episodes


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
