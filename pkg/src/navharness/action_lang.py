"""Mid-level action language: regex extraction from free-form agent text.

The grammar is templated (see ``docs/action-grammar.md``). Extraction picks
the first action mention in reading order; nothing is guessed when a mention
is incomplete.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

from .errors import MagnitudeOutOfRange, MissingMagnitude, NoActionFound

__all__ = [
    "Action",
    "ActionKind",
    "Limits",
    "ParseReport",
    "DEFAULT_LIMITS",
    "format_action",
    "parse_action",
    "parse_all",
]


class ActionKind(str, enum.Enum):
    FORWARD = "forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    STOP = "stop"

    @property
    def is_turn(self) -> bool:
        return self in (ActionKind.TURN_LEFT, ActionKind.TURN_RIGHT)


@dataclass(frozen=True)
class Limits:
    """Safety bounds on parsed magnitudes (meters / degrees)."""

    max_forward_m: float = 5.0
    max_turn_deg: float = 180.0


DEFAULT_LIMITS = Limits()


@dataclass(frozen=True)
class Action:
    """One mid-level command. ``magnitude`` is meters for forward, degrees for turns."""

    kind: ActionKind
    magnitude: float = 0.0

    def __post_init__(self) -> None:
        kind = ActionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        mag = float(self.magnitude)
        object.__setattr__(self, "magnitude", mag)
        if kind is ActionKind.STOP:
            if mag != 0.0:
                raise MagnitudeOutOfRange(f"stop carries no magnitude, got {mag}")
        elif not (math.isfinite(mag) and mag > 0.0):
            raise MagnitudeOutOfRange(f"{kind.value} magnitude must be positive, got {mag}")

    @classmethod
    def forward(cls, meters: float) -> Action:
        return cls(ActionKind.FORWARD, meters)

    @classmethod
    def turn_left(cls, degrees: float) -> Action:
        return cls(ActionKind.TURN_LEFT, degrees)

    @classmethod
    def turn_right(cls, degrees: float) -> Action:
        return cls(ActionKind.TURN_RIGHT, degrees)

    @classmethod
    def stop(cls) -> Action:
        return cls(ActionKind.STOP, 0.0)

    def check(self, limits: Limits = DEFAULT_LIMITS) -> Action:
        if self.kind is ActionKind.FORWARD and self.magnitude > limits.max_forward_m:
            raise MagnitudeOutOfRange(
                f"forward {self.magnitude} m exceeds {limits.max_forward_m} m"
            )
        if self.kind.is_turn and self.magnitude > limits.max_turn_deg:
            raise MagnitudeOutOfRange(
                f"turn {self.magnitude} deg exceeds {limits.max_turn_deg} deg"
            )
        return self

    def quantized(self) -> Action:
        """The action as it survives formatting: whole centimeters, hundredths of a degree."""
        if self.kind is ActionKind.FORWARD:
            return Action(self.kind, _centimeters(self.magnitude) / 100)
        if self.kind.is_turn:
            return Action(self.kind, _hundredth_degrees(self.magnitude))
        return self

    def to_dict(self) -> dict:
        unit = {"forward": "m", "turn_left": "deg", "turn_right": "deg"}.get(self.kind.value)
        return {"kind": self.kind.value, "magnitude": self.magnitude, "unit": unit}

    @classmethod
    def from_dict(cls, data: dict) -> Action:
        return cls(ActionKind(data["kind"]), data.get("magnitude", 0.0))

    def __str__(self) -> str:
        return format_action(self)


@dataclass(frozen=True)
class ParseReport:
    action: Action
    span: tuple[int, int]
    canonical_text: str

    def to_dict(self) -> dict:
        return {
            "action": self.action.to_dict(),
            "span": list(self.span),
            "canonical_text": self.canonical_text,
        }


# --- grammar ---------------------------------------------------------------

_NUMBER = r"(?:\d+(?:\.\d+)?|\.\d+)"
_FILLER = r"(?:\s+(?:by|for|about|around|approximately|roughly|another))*\s*"
_DIST_UNIT = r"(?:centimet(?:er|re)s?|cm|met(?:er|re)s?|m)\b"
_ANGLE_UNIT = r"(?:degrees?|degs?|°)"
_TURN_VERB = r"(?:turn|turns|turning|turned|rotate|rotates|rotating|rotated)"
_SIDE = r"(?:to\s+(?:the\s+|your\s+)?)?"
_FWD_VERB = (
    r"(?:(?:move|moves|moving|moved|go|goes|going|walk|walks|walking"
    r"|proceed|proceeds|proceeding|head|heads|heading|step|steps)\s+)?"
)

_GRAMMAR = re.compile(
    # "turn 30 degrees to the left" must be tried before the bare "turn left" form
    rf"(?P<turn_num_first>\b{_TURN_VERB}\s+(?P<tn_num>{_NUMBER})\s*{_ANGLE_UNIT}?\s*{_SIDE}"
    rf"(?P<tn_dir>left|right)\b)"
    rf"|(?P<turn>\b{_TURN_VERB}\s+{_SIDE}(?P<t_dir>left|right)\b"
    rf"(?:{_FILLER}(?P<t_num>{_NUMBER})(?:\s*{_ANGLE_UNIT})?)?)"
    rf"|(?P<fwd>\b{_FWD_VERB}forwards?\b"
    rf"(?:{_FILLER}(?P<f_num>{_NUMBER})\s*(?P<f_unit>{_DIST_UNIT}))?)"
    rf"|(?P<stop>\bstop(?:s|ped|ping)?\b)",
    re.IGNORECASE,
)


def _centimeters(meters: float) -> int:
    return max(1, int(round(meters * 100)))


def _hundredth_degrees(deg: float) -> float:
    return max(0.01, round(deg, 2))


def _format_degrees(deg: float) -> str:
    q = _hundredth_degrees(deg)
    if q == int(q):
        return str(int(q))
    return f"{q:.2f}".rstrip("0").rstrip(".")


def _distance_in_meters(num: str, unit: str) -> float:
    value = float(num)
    if unit.lower().startswith("c"):
        return value / 100
    return value


def _mention(m: re.Match) -> tuple[ActionKind, float | None]:
    """Kind and magnitude (``None`` when missing) for one grammar match."""
    if m.group("turn_num_first"):
        kind = ActionKind.TURN_LEFT if m.group("tn_dir").lower() == "left" else ActionKind.TURN_RIGHT
        return kind, float(m.group("tn_num"))
    if m.group("turn"):
        kind = ActionKind.TURN_LEFT if m.group("t_dir").lower() == "left" else ActionKind.TURN_RIGHT
        num = m.group("t_num")
        return kind, None if num is None else float(num)
    if m.group("fwd"):
        num = m.group("f_num")
        if num is None:
            return ActionKind.FORWARD, None
        return ActionKind.FORWARD, _distance_in_meters(num, m.group("f_unit"))
    return ActionKind.STOP, 0.0


def _build(kind: ActionKind, magnitude: float | None, text: str, limits: Limits) -> Action:
    if magnitude is None:
        what = "a distance with a unit (cm or m)" if kind is ActionKind.FORWARD else "an angle"
        raise MissingMagnitude(f"{kind.value} mentioned without {what}: {text!r}")
    if kind is not ActionKind.STOP and magnitude <= 0:
        raise MagnitudeOutOfRange(f"{kind.value} magnitude must be positive, got {magnitude}")
    return Action(kind, magnitude).check(limits)


def parse_action(text: str, limits: Limits = DEFAULT_LIMITS) -> ParseReport:
    """Extract the first action mentioned in ``text``.

    Raises NoActionFound, MissingMagnitude or MagnitudeOutOfRange; there is no
    fallback action.
    """
    if not text:
        raise NoActionFound("empty text")
    m = _GRAMMAR.search(text)
    if m is None:
        raise NoActionFound(f"no action in {text!r}")
    kind, magnitude = _mention(m)
    action = _build(kind, magnitude, m.group(0), limits)
    return ParseReport(action, (m.start(), m.end()), format_action(action))


def parse_all(text: str, limits: Limits = DEFAULT_LIMITS) -> list[ParseReport]:
    """Every complete, in-bounds action mention in reading order."""
    reports = []
    for m in _GRAMMAR.finditer(text or ""):
        kind, magnitude = _mention(m)
        try:
            action = _build(kind, magnitude, m.group(0), limits)
        except (MissingMagnitude, MagnitudeOutOfRange):
            continue
        reports.append(ParseReport(action, (m.start(), m.end()), format_action(action)))
    return reports


def format_action(action: Action) -> str:
    if action.kind is ActionKind.FORWARD:
        return f"move forward {_centimeters(action.magnitude)} cm"
    if action.kind is ActionKind.TURN_LEFT:
        return f"turn left {_format_degrees(action.magnitude)} degrees"
    if action.kind is ActionKind.TURN_RIGHT:
        return f"turn right {_format_degrees(action.magnitude)} degrees"
    return "stop"
