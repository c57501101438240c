"""Exceptions raised across metacog-rl."""
from typing import Optional, Sequence


class MetacogError(Exception):
    """Base class of every error raised by the package."""


class ConfigError(MetacogError, ValueError):
    """Invalid run configuration."""

    def __init__(self, key_path: str, message: str):
        """Initializes the error.

        Args:
            key_path: dotted path of the offending key (e.g. ``scenario.seed``)
            message: what is wrong with it
        """
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class FormulaSyntaxError(MetacogError, ValueError):
    """STL text that does not follow the grammar."""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")


class UnknownSignalError(MetacogError, ValueError):
    """A formula references a signal component missing from the schema."""


class IntervalError(MetacogError, ValueError):
    """Negative or inverted temporal interval."""


class EmptyWindowError(MetacogError, ValueError):
    """A temporal window holds no sample after truncation."""


class DataCountError(MetacogError, ValueError):
    """Not enough recorded intervals for the off-policy regression."""

    def __init__(self, required: int, given: int):
        self.required = required
        self.given = given
        super().__init__(f"at least {required} intervals are required, got {given}")


class NumericalError(MetacogError, ArithmeticError):
    """Base class of numerical failures."""


class SingularMatrixError(NumericalError):
    """A linear system stayed singular after jitter escalation."""


class IllConditionedError(NumericalError):
    """A projection or solve exceeded the allowed condition number."""


class RankDeficiencyError(NumericalError):
    """The off-policy regressor matrix does not have full column rank."""

    def __init__(self, rank: int, n_rows: int, n_cols: int, cond: float = float("inf")):
        self.rank = rank
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.cond = cond
        super().__init__(
            f"regressor matrix is rank deficient: numerical rank {rank} of {n_cols} columns "
            f"with N={n_rows} rows (condition number {cond:.3g})"
        )


class NonConvergenceError(NumericalError):
    """An iteration hit its cap without meeting the tolerance."""

    def __init__(self, message: str, changes: Optional[Sequence[float]] = None):
        self.changes = list(changes) if changes is not None else []
        super().__init__(f"{message}; changes: {self.changes}")


class NotStabilizableError(NumericalError):
    """The pair handed to the Riccati oracle cannot be stabilized."""


class SimulationDivergedError(NumericalError):
    """State norm exceeded the blow-up bound."""

    def __init__(self, time: float, norm: float):
        self.time = time
        self.norm = norm
        super().__init__(f"state norm {norm:.3g} exceeded the blow-up bound at t={time:.6g}s")


class SafeSetError(MetacogError):
    """Base class of safe Bayesian optimization failures."""


class UnsafeSeedError(SafeSetError):
    """The seed hyperparameters score below the safety threshold."""


class EmptySafeSetError(SafeSetError):
    """No grid point is certified safe any more."""


class StageError(MetacogError):
    """A failure inside an episode, annotated with the stage and the episode time."""

    def __init__(self, stage: str, time: float, cause: BaseException):
        self.stage = stage
        self.time = time
        self.cause = cause
        super().__init__(f"stage '{stage}' failed at t={time:.6g}s: {cause}")
