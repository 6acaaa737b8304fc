"""Exception hierarchy.

Configuration and validation problems (bad input the user can fix) derive from
``InputError``; the CLI maps them to exit code 2. Everything else derived from
``BalweightsError`` is a runtime failure (exit code 1).
"""


class BalweightsError(Exception):
    """Base class for all package errors."""


class InputError(BalweightsError):
    """Input that fails validation against its contract."""


class SchemaError(InputError):
    """A mapped column is missing from the input file."""


class ValidationError(InputError):
    """A cell or row has an invalid value."""


class ConfigError(InputError):
    """Malformed or unknown configuration keys."""


class BasisSpecError(InputError):
    """A basis term references an unknown variable or is malformed."""


class DegenerateInputError(InputError):
    """Data cannot support the requested transformation or fit."""


class NoOverlapError(BalweightsError):
    """Clusters that contain focal rows but no comparison rows."""

    def __init__(self, clusters):
        self.clusters = list(clusters)
        super().__init__(
            'no-overlap cluster(s) with focal rows but zero comparison rows: '
            + ', '.join(str(c) for c in self.clusters))


class SingularSystemError(BalweightsError):
    """A linear system that should be nonsingular is numerically singular."""


class SeparationError(BalweightsError):
    """Logistic regression diverges because the groups are (quasi-)separated."""


class ConvergenceError(BalweightsError):
    """An iterative fit failed to converge."""

    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class LeakageError(InputError):
    """Screening rows leaked into the analysis sample."""
