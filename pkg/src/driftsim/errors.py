"""Exception hierarchy. The CLI maps these onto exit codes."""


class DriftSimError(Exception):
    """Base class for all package errors."""


class InvalidConfig(DriftSimError, ValueError):
    pass


class ShapeError(DriftSimError, ValueError):
    pass


class InvalidLabel(DriftSimError, ValueError):
    pass


class InvalidInput(DriftSimError, ValueError):
    pass


class UndefinedCorrelation(DriftSimError, ValueError):
    """Correlation requested for a constant (zero-variance) series."""


class RangeError(DriftSimError, ValueError):
    pass


class DivergenceError(DriftSimError, RuntimeError):
    def __init__(self, message: str, round_idx: int | None = None):
        super().__init__(message)
        self.round_idx = round_idx


class CalibrationInfeasible(DriftSimError, RuntimeError):
    def __init__(self, message: str, max_drop: float):
        super().__init__(message)
        self.max_drop = max_drop


class ExperimentAborted(DriftSimError, RuntimeError):
    """A grid cell failed; carries the cells that did complete."""

    def __init__(self, message: str, completed: list):
        super().__init__(message)
        self.completed = completed
