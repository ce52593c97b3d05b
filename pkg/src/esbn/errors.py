"""Exception hierarchy.

The three top-level families map onto the command-line exit codes:
configuration problems (2), bad or inconsistent data (3) and numerical
failures (4).
"""


class EsbnError(Exception):
    exit_code = 1


class ConfigurationError(EsbnError, ValueError):
    exit_code = 2


class DataError(EsbnError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Container file does not follow the ESIW layout."""


class PayloadLengthError(FormatError):
    pass


class DimensionError(DataError):
    pass


class GeometryError(DataError):
    pass


class NumericError(EsbnError, ArithmeticError):
    exit_code = 4


class DegenerateOrientationError(NumericError):
    def __init__(self, sources):
        self.sources = list(sources)
        shown = ", ".join(str(s) for s in self.sources[:10])
        more = "" if len(self.sources) <= 10 else f" (+{len(self.sources) - 10} more)"
        super().__init__(f"channel-sum orientation vanishes for sources {shown}{more}")


class SolverError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    pass
