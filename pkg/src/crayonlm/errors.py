"""Exception types shared across the package.

Each class maps to one failure family so the CLI can translate it into a
stable exit code.
"""


class CrayonError(Exception):
    """Base class for all package errors."""


class ShapeError(CrayonError, ValueError):
    pass


class EmptyLossError(CrayonError, ValueError):
    """Raised when a masked loss has no active positions."""


class TapeStateError(CrayonError, RuntimeError):
    """Raised on backward through a graph that was already consumed."""


class ArgumentError(CrayonError, ValueError):
    pass


class GenerationError(CrayonError, RuntimeError):
    """Synthetic scene placement failed."""


class ProtocolError(CrayonError, ValueError):
    """Token sequence violates the image/text prompt protocol."""


class ConfigError(CrayonError, ValueError):
    pass


class TrainingAbort(CrayonError, RuntimeError):
    pass


class FreezeViolation(CrayonError, AssertionError):
    """A parameter group that must stay frozen changed during training."""


class ArtifactError(CrayonError, IOError):
    """Checkpoint or dataset file is missing, malformed, or incomplete."""
