"""Exception taxonomy shared across the package.

Validation-type errors map to CLI exit code 2, numerical-type errors to 3.
"""


class DrdmlError(Exception):
    """Base class for all package errors."""


class SchemaError(DrdmlError):
    """A required column or config field is missing or malformed."""


class ParseError(DrdmlError):
    """A cell could not be parsed as a finite number."""


class SizeError(DrdmlError):
    """Sample too small for the requested operation."""


class ParameterError(DrdmlError):
    """An argument is outside its valid range."""


class ShapeError(DrdmlError):
    """Array dimensions are inconsistent."""


class InputError(DrdmlError):
    """Non-finite or otherwise invalid numeric input."""


class DegenerateVarianceError(DrdmlError):
    """The estimated score variance is not positive."""


class NonInvertibleError(DrdmlError):
    """The score's Jacobian term is numerically zero."""


class InversionError(DrdmlError):
    """Test inversion failed (statistic non-finite over most of the grid)."""


class ExperimentError(DrdmlError):
    """Too many Monte Carlo replications failed."""


class StackFitError(DrdmlError):
    """Every member of a stacking ensemble failed to fit."""

    def __init__(self, failures):
        self.failures = tuple(failures)
        lines = "; ".join(f"member {i}: {msg}" for i, msg in self.failures)
        super().__init__(f"all stack members failed: {lines}")


VALIDATION_ERRORS = (SchemaError, ParseError, SizeError, ParameterError, ShapeError, InputError)
NUMERICAL_ERRORS = (
    DegenerateVarianceError,
    NonInvertibleError,
    InversionError,
    ExperimentError,
    StackFitError,
)
