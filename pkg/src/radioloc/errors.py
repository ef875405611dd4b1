"""Exception types shared across the package."""


class RadiolocError(Exception):
    """Base class for all package errors."""


class ConfigError(RadiolocError, ValueError):
    """Configuration text does not match the schema."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ValidationError(RadiolocError, ValueError):
    """A domain invariant is violated."""

    def __init__(self, invariant: str, message: str = ""):
        self.invariant = invariant
        text = invariant if not message else f"{invariant}: {message}"
        super().__init__(text)


class DegenerateGeometryError(RadiolocError, ValueError):
    pass


class SingularInputError(RadiolocError, ValueError):
    pass


class ResolutionError(RadiolocError, RuntimeError):
    pass


class InfeasibleDesignError(RadiolocError, RuntimeError):
    """No allocation in the design space meets the sidelobe margin."""

    def __init__(self, message: str, binding_offset: float, worst_sidelobe_db: float):
        self.binding_offset = binding_offset
        self.worst_sidelobe_db = worst_sidelobe_db
        super().__init__(message)


class NotIdentifiableError(RadiolocError, ValueError):
    def __init__(self, message: str, null_space_dim: int):
        self.null_space_dim = null_space_dim
        super().__init__(message)


class SeparationError(RadiolocError, ValueError):
    pass


class AmbiguityTooWideError(RadiolocError, ValueError):
    pass
