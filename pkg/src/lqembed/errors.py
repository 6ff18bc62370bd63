"""Shared exception types."""

from __future__ import annotations


class ContractViolation(ValueError):
    """An argument or state violates a documented precondition."""


class NumericalError(RuntimeError):
    """An iterative numerical routine failed to converge.

    Carries enough context (iteration counts, residuals) to diagnose the
    failure without re-running.
    """

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = dict(diagnostics)


class BlowupError(RuntimeError):
    """A state evaluation produced a non-finite or runaway value.

    Attributes
    ----------
    stage : str
        Which evaluation produced the bad value (e.g. "rk4:k2").
    step_index : int
        Step at which the blowup occurred, when known.
    """

    def __init__(self, message: str, stage: str = "", step_index: int = -1):
        super().__init__(message)
        self.stage = stage
        self.step_index = step_index


class ConfigError(ValueError):
    """A configuration file or preset is malformed or inconsistent."""
