"""exceptions"""

from typing import Any, Optional


class GraphTuneError(Exception):
    """Base class of all errors raised by graphtune."""


class GraphFormatError(GraphTuneError, ValueError):
    """Raised when a graph file or graph object violates the graph schema."""


class SplitError(GraphTuneError, ValueError):
    """Raised when a labeled/unlabeled split cannot be drawn."""


class CacheError(GraphTuneError, RuntimeError):
    """Raised when a backward pass receives a stale or mismatched forward cache."""


class DivergenceError(GraphTuneError, FloatingPointError):
    """Raised when an intermediate value or a loss becomes non-finite."""


class FreezeViolationError(GraphTuneError, RuntimeError):
    """Raised when the content digest of a frozen decoder changes."""


class InvariantViolationError(GraphTuneError, RuntimeError):
    """Raised when a self-training invariant breaks.

    Parameters
    ----------
    message : str
        Description of the violated invariant.
    state : dict, optional
        JSON-serialisable dump of the pipeline state at the time of the violation.
    """

    def __init__(self, message: str, state: Optional[dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.state = state or {}
