"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see cli.py), so stages can
fail in a way scripts can dispatch on.
"""


class DiffmarkError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(DiffmarkError):
    """Invalid or inconsistent experiment configuration."""


class DependencyError(DiffmarkError):
    """A stage was run before the stage producing its inputs."""

    def __init__(self, missing_stage: str, detail: str = ""):
        self.missing_stage = missing_stage
        msg = f"missing artifact from stage '{missing_stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class TrainingError(DiffmarkError):
    """Training failed to converge within its budget; carries the loss trace."""

    def __init__(self, message: str, loss_trace=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace) if loss_trace is not None else []


class NumericError(DiffmarkError):
    """A non-finite value appeared mid-computation; carries diagnostics."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics) if diagnostics is not None else {}


class StateError(DiffmarkError):
    """Operation requires a trained/initialized component that is not ready."""
