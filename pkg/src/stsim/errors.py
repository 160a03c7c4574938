"""Exception hierarchy shared by every simulator layer."""


class SimError(Exception):
    """Base class for all simulator errors."""


class SimulationError(SimError):
    """Internal protocol-model bug, e.g. scheduling an event in the past."""


class Deadlock(SimError):
    """The event queue drained while entities were still blocked."""

    def __init__(self, blocked):
        self.blocked = list(blocked)
        super().__init__("deadlock; blocked entities: " + "; ".join(self.blocked))


class ConfigError(SimError):
    pass


class ResourceExhausted(SimError):
    """The triggered-operation pool has no free descriptor."""


class EpochClosed(SimError):
    pass


class EpochAlreadyOpen(SimError):
    pass


class GroupMismatch(SimError):
    pass


class InvalidArgument(SimError):
    pass


class TruncationError(SimError):
    pass


class ParseError(SimError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SummaryError(SimError):
    pass
