"""Exception hierarchy shared across the harness."""

from __future__ import annotations


class NavHarnessError(Exception):
    """Base class for every domain error raised by this package."""


# action language
class ActionParseError(NavHarnessError, ValueError):
    pass


class NoActionFound(ActionParseError):
    pass


class MagnitudeOutOfRange(ActionParseError):
    pass


class MissingMagnitude(ActionParseError):
    pass


# scenes and grids
class SchemaError(NavHarnessError, ValueError):
    pass


class ValidationError(NavHarnessError, ValueError):
    pass


class GenerationFailed(NavHarnessError):
    pass


class OutOfBounds(NavHarnessError, IndexError):
    pass


class Unreachable(NavHarnessError):
    pass


# locomotion / perception
class DimensionMismatch(NavHarnessError, ValueError):
    pass


class LayoutMismatch(NavHarnessError, ValueError):
    pass


class DimsMismatch(NavHarnessError, ValueError):
    pass


class PoseOutsideScene(NavHarnessError, ValueError):
    pass


# episodes
class AgentError(NavHarnessError):
    pass


class AgentTimeout(AgentError):
    pass


class TransportError(AgentError):
    pass


class BadResponse(AgentError):
    pass


class DegenerateTrajectory(NavHarnessError, ValueError):
    pass


# metrics
class EmptyPath(NavHarnessError, ValueError):
    pass


class EmptyTrace(NavHarnessError, ValueError):
    pass


class EmptyInput(NavHarnessError, ValueError):
    pass


class DegenerateEpisode(NavHarnessError):
    pass


# cli / io
class PortInUse(NavHarnessError, OSError):
    pass
