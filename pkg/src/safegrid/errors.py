"""Exception hierarchy shared by all modules."""


class SafegridError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(SafegridError):
    """Invalid control, device or schedule configuration."""


class ValidationError(SafegridError):
    """One or more problems found while reading an input file.

    ``errors`` holds every message found, so a file can be fixed in one pass.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TopologyError(SafegridError):
    """The network is islanded or has no voltage source left."""

    def __init__(self, message, islanded=()):
        self.islanded = tuple(islanded)
        super().__init__(message)


class EventError(SafegridError):
    """A disturbance event addresses a missing or already tripped element."""


class SolverError(SafegridError):
    """Newton iteration failed to converge; carries the final mismatch vector."""

    def __init__(self, message, mismatch=None):
        self.mismatch = mismatch
        super().__init__(message)


class InitializationError(SafegridError):
    """No pre-disturbance equilibrium could be found."""


class SimulationAbort(SafegridError):
    """A frequency left the hard-abort band or the state became non-finite."""


class MetricError(SafegridError):
    """A metric is undefined for the given data (e.g. all generators tripped)."""
