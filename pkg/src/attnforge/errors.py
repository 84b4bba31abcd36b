"""Exception types shared across the package."""


class AttnforgeError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(AttnforgeError, ValueError):
    """An argument is outside its documented domain."""


class DimensionError(AttnforgeError, ValueError):
    """Matrix or vector shapes do not compose."""


class InputError(AttnforgeError, ValueError):
    """A runtime input (e.g. the vector fed to a net) is invalid."""


class EvaluationOverflowError(AttnforgeError, ArithmeticError):
    """A forward pass produced a non-finite intermediate value."""

    def __init__(self, block_index: int):
        self.block_index = block_index
        super().__init__(f"non-finite intermediate after block {block_index}")


class ResourceBudgetError(AttnforgeError, RuntimeError):
    """An evaluation/token budget would be exceeded; carries the required amount."""

    def __init__(self, message: str, required: int | float | None = None):
        self.required = required
        super().__init__(message)


class BoundViolationError(AttnforgeError, ValueError):
    """A magnitude bound required by a constructor does not hold."""


class UnsupportedBlockError(AttnforgeError, ValueError):
    """A block lacks the provenance needed for the requested transformation."""


class CoverageError(AttnforgeError, ValueError):
    """An atlas fails to cover the manifold; names an uncovered sample."""

    def __init__(self, message: str, sample=None):
        self.sample = sample
        super().__init__(message)


class DuplicatePointError(AttnforgeError, ValueError):
    """A query point coincides with another point within tolerance."""


class InsufficientDataError(AttnforgeError, ValueError):
    """Too few points remain for the requested estimate."""


class DomainError(AttnforgeError, ValueError):
    """A numeric value is outside the mathematical domain of an operation."""


class ConfigError(AttnforgeError, ValueError):
    """An experiment configuration document is malformed."""


class CheckFailureError(AttnforgeError, RuntimeError):
    """A report-level acceptance check failed; names the failing invariant."""
