"""Exception types shared across the package.

Each class carries an ``exit_code`` used by the command line front end:
1 for configuration problems, 2 for bad or insufficient data, 3 for
numerical failures.
"""


class EegTcavError(Exception):
    exit_code = 2


class ConfigError(EegTcavError):
    exit_code = 1


class DataError(EegTcavError):
    """Input data is malformed or does not satisfy a precondition."""


class FormatError(DataError):
    """A binary container (EDF, EEGW, LHBW, lead field) failed validation."""


class MalformedHeaderError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class DegenerateScalingError(FormatError):
    pass


class AnnotationRowError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MontageError(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("unmappable montage, missing channels: " + ", ".join(self.missing))


class ShapeError(DataError):
    pass


class SampleSizeError(DataError):
    pass


class ProtocolError(DataError):
    pass


class EmptyConceptError(DataError):
    pass


class FilterDesignError(DataError):
    pass


class InputTooShortError(ShapeError):
    pass


class TrainingDegenerateError(DataError):
    pass


class NumericError(EegTcavError):
    exit_code = 3


class DegenerateTestError(NumericError):
    """A statistical test is undefined for the supplied sample."""
