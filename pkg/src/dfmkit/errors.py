"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, validation and
configuration problems exit 2, oracle-check failures exit 3.
"""


class DfmError(Exception):
    """Base class for all package errors."""


class DomainError(DfmError):
    """An argument lies outside the mathematical domain of an operation."""


class ValidationError(DfmError):
    """Structurally valid input that violates a documented precondition."""


class ConfigError(DfmError):
    """Malformed or inconsistent run configuration."""


class EvidenceError(DfmError):
    """An observation with zero likelihood under the posterior model."""


class NumericalGuardError(DfmError):
    """A numerical guard tripped (renormalizing zero mass, NaN loss, ...)."""
