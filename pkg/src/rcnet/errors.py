"""Exception types mapped to CLI exit codes."""


class RcnetError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(RcnetError):
    """Invalid experiment configuration (exit code 2)."""


class DataError(RcnetError):
    """Invalid or unreadable dataset/image input (exit code 3)."""


class CheckpointError(RcnetError):
    """Invalid or mismatched checkpoint file (exit code 4)."""


class NumericalCheckError(RcnetError):
    """A numerical equivalence check failed (exit code 5)."""
