"""Exception types raised across the package."""


class SpecificationError(ValueError):
    """An environment, model or problem description violates its invariants."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class BlowUpError(RuntimeError):
    """A time stepper produced a non-finite value."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ResourceError(RuntimeError):
    """The step budget cannot cover the requested horizon."""

    def __init__(self, message: str, required_steps: int):
        super().__init__(message)
        self.required_steps = required_steps


class TableRangeError(ValueError):
    """An effective Hamiltonian table was queried outside its grid."""

    def __init__(self, message: str, axis: str, required: tuple[float, float]):
        super().__init__(message)
        self.axis = axis
        self.required = required


class ConfigError(ValueError):
    """One or more problems found while validating an experiment config."""

    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = list(errors)
