"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: check failures exit 1,
configuration/format problems exit 2, runtime numeric/data problems exit 3.
"""


class VesselkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(VesselkitError):
    """Invalid shapes, options, file formats, or pipeline wiring."""


class NumericError(VesselkitError):
    """Non-finite values, guarded divisions, or numeric domain violations."""


class StateError(VesselkitError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class ContractError(VesselkitError):
    """Caller violated a documented precondition on data content."""


class UndefinedMetricError(VesselkitError):
    """A metric is undefined for the given data (e.g. single-class mask)."""


class CheckFailure(VesselkitError):
    """A gradient or consistency check exceeded its tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
