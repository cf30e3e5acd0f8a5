"""Exception hierarchy shared by every module.

Each family carries the CLI exit code it maps to, so command wrappers can
translate failures without a lookup table.
"""


class IsmrnnError(Exception):
    exit_code = 1


class ConfigError(IsmrnnError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """An argument lies outside its admissible domain."""


class DataError(IsmrnnError):
    exit_code = 3


class IngestionError(DataError):
    pass


class OrderingError(DataError):
    pass


class DegenerateChannelError(DataError):
    pass


class FormatError(DataError):
    """A checkpoint or report file is malformed."""


class NumericError(IsmrnnError, ArithmeticError):
    exit_code = 4


class ShapeError(IsmrnnError, ValueError):
    """Incompatible array shapes; the message names both."""

    exit_code = 2


class ContractError(IsmrnnError):
    exit_code = 4


class StateError(IsmrnnError, RuntimeError):
    exit_code = 4
