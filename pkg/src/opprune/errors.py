"""Exception hierarchy shared across the package."""

from __future__ import annotations


class OpPruneError(Exception):
    """Base class for all package errors."""


class ConfigError(OpPruneError):
    """Invalid configuration, layout, or input file (CLI exit code 2)."""


class EmptyOperationSpaceError(ConfigError):
    """Layout has no prunable group, so there is nothing to search over."""


class ScheduleError(ConfigError):
    """Threshold schedule cannot be built (e.g. non-positive baseline)."""


class StalePolicyError(OpPruneError):
    """Policy or sequence was built against a different decoder config."""


class BudgetInfeasibleError(OpPruneError):
    """Requested FLOPs reduction exceeds what the sequence can deliver (exit 3)."""

    def __init__(self, message: str, max_reduction: int):
        super().__init__(message)
        self.max_reduction = max_reduction


class EvaluatorFailure(OpPruneError):
    """An evaluator raised, crashed, or returned an error response (exit 4)."""


class AttentionDegenerateError(OpPruneError):
    """A query position is left with no retained key position to attend to."""


class ProtocolError(OpPruneError):
    """Malformed or out-of-contract traffic on the worker wire protocol."""


class WorkerLaunchError(ProtocolError):
    """Worker process could not be started."""


class HandshakeTimeoutError(ProtocolError):
    """Worker did not complete the hello exchange within the timeout."""


class VersionMismatchError(ProtocolError):
    """Worker speaks a protocol version other than the required one."""
