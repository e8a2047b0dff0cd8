"""Exception types.  ``exit_code`` is what the CLI returns for each family."""


class CedqnError(Exception):
    exit_code = 1


class ConfigError(CedqnError, ValueError):
    exit_code = 2


class ShapeError(CedqnError, ValueError):
    exit_code = 2


class EnvError(CedqnError, ValueError):
    exit_code = 2


class IOFailure(CedqnError, OSError):
    exit_code = 3


class CheckpointError(IOFailure):
    """Unreadable checkpoint; ``kind`` is one of malformed / version / shape / missing."""

    def __init__(self, message, kind="malformed"):
        super().__init__(message)
        self.kind = kind


class DivergenceError(CedqnError, ArithmeticError):
    exit_code = 4
