"""Exception hierarchy and CLI exit codes.

Exit code convention used by the command line tool:
    0  success
    1  usage error (bad arguments)
    2  data error (missing/inconsistent inputs)
    3  numerical failure (non-finite gradients etc.)
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class SemRefineError(Exception):
    """Base class for all errors raised by this package."""


class DataError(SemRefineError):
    """Invalid or inconsistent input data (exit code 2)."""


class NumericalError(SemRefineError):
    """Numerical failure during optimization (exit code 3)."""


class NonManifoldEdge(DataError):
    """An edge is shared by more than two facets."""

    def __init__(self, edge, count):
        self.edge = tuple(edge)
        self.count = int(count)
        super().__init__(f"edge {self.edge} shared by {self.count} facets (max 2)")


class DegenerateFacet(DataError):
    """A facet has (near-)zero area, so its normal is undefined."""

    def __init__(self, facet_index, squared_area):
        self.facet_index = int(facet_index)
        self.squared_area = float(squared_area)
        super().__init__(
            f"facet {self.facet_index} is degenerate (squared area {self.squared_area:g})"
        )


class BehindCamera(DataError):
    """A point projects behind the camera (depth <= epsilon)."""

    def __init__(self, depth):
        self.depth = float(depth)
        super().__init__(f"point behind camera (depth {self.depth:g})")


class DimensionMismatch(DataError):
    """Image/mask dimensions disagree with the camera they belong to."""


class InstanceTooLarge(DataError):
    """Exhaustive labeling enumeration would exceed the configured bound."""


class EmptyOverlap(DataError):
    """Two depth maps have no pixel where both are defined."""


class NonFiniteGradient(NumericalError):
    """A gradient entry became NaN/inf; carries diagnostics for the dump."""

    def __init__(self, message, vertex_index=None, term=None):
        self.vertex_index = vertex_index
        self.term = term
        super().__init__(message)


class ConfigError(DataError):
    """Malformed configuration file or invalid configuration value."""
